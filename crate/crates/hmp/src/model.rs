//! Transformer model definition, weight synthesis, checkpoint I/O, memory
//! accounting, and the single-device reference forward pass that serves as
//! ground truth for every distributed path.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::planner::PartitionPlan;
use crate::rng::SplitMix64;
use crate::tensor::{
    self, dropout_inference, gelu, layer_norm, residual_add, self_attention, DType, Scalar, Tensor,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const CHECKPOINT_MAGIC: &[u8; 4] = b"HMPW";
const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Transformer hyperparameters. The MLP expansion is fixed at 4x hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub max_seq: usize,
    pub dtype: DType,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        hidden: usize,
        max_seq: usize,
        dtype: DType,
    ) -> Result<Self> {
        let cfg = Self { num_layers, num_heads, hidden, max_seq, dtype };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn intermediate(&self) -> usize {
        4 * self.hidden
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// One Transformer layer's parameters.
///
/// Projections are stored activations-times-weights, i.e. an input row vector
/// is multiplied from the left: `h x h` for the attention projections,
/// `h x 4h` up, `4h x h` down.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bq: Vec<T>,
    pub bk: Vec<T>,
    pub bv: Vec<T>,
    /// Attention output projection.
    pub wb: Tensor<T>,
    pub bb: Vec<T>,
    /// MLP up projection (h -> 4h).
    pub wd: Tensor<T>,
    pub bd: Vec<T>,
    /// MLP down projection (4h -> h).
    pub we: Tensor<T>,
    pub be: Vec<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights<T>>,
}

fn check_dtype<T: Scalar>(config: &ModelConfig) -> Result<()> {
    if config.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "config dtype {} does not match element type {}",
            config.dtype,
            T::DTYPE
        )));
    }
    Ok(())
}

/// Deterministic weight synthesis: normal(0, 0.02) weights and biases keep
/// activations tame through deep stacks; layer-norm gains start at identity.
pub fn init_random<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    check_dtype::<T>(config)?;
    let h = config.hidden;
    let inter = config.intermediate();
    let mut rng = SplitMix64::new(seed);
    let matrix = |rows: usize, cols: usize, rng: &mut SplitMix64| {
        Tensor::from_fn(rows, cols, |_, _| T::from_f64(rng.normal(0.0, 0.02)))
    };
    let vector =
        |n: usize, rng: &mut SplitMix64| (0..n).map(|_| T::from_f64(rng.normal(0.0, 0.02))).collect();

    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            wq: matrix(h, h, &mut rng),
            wk: matrix(h, h, &mut rng),
            wv: matrix(h, h, &mut rng),
            bq: vector(h, &mut rng),
            bk: vector(h, &mut rng),
            bv: vector(h, &mut rng),
            wb: matrix(h, h, &mut rng),
            bb: vector(h, &mut rng),
            wd: matrix(h, inter, &mut rng),
            bd: vector(inter, &mut rng),
            we: matrix(inter, h, &mut rng),
            be: vector(h, &mut rng),
            ln1_gamma: vec![T::one(); h],
            ln1_beta: vec![T::zero(); h],
            ln2_gamma: vec![T::one(); h],
            ln2_beta: vec![T::zero(); h],
        });
    }
    Ok(Model { config: *config, layers })
}

// ---------------------------------------------------------------------------
// Reference forward pass
// ---------------------------------------------------------------------------

pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<Tensor<T>> {
    let y = tensor::gemm(x, w)?;
    Ok(tensor::add_row_vector(&y, b)?)
}

/// Dropout (identity) -> residual add -> layer norm, the connective block
/// between the MHA and MLP blocks. Row-local, so any sequence split computes
/// identical rows.
pub fn connective<T: Scalar>(
    block_out: &Tensor<T>,
    residual: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<Tensor<T>> {
    let summed = residual_add(&dropout_inference(block_out), residual)?;
    Ok(layer_norm(&summed, gamma, beta, T::from_f64(LAYER_NORM_EPS))?)
}

/// Full-width MHA block: QKV projection, per-head attention, output
/// projection. Post-layer-norm placement: normalization happens in the
/// connective block after the residual add, not here.
pub fn reference_mha<T: Scalar>(
    layer: &LayerWeights<T>,
    config: &ModelConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let q = linear(x, &layer.wq, &layer.bq)?;
    let k = linear(x, &layer.wk, &layer.bk)?;
    let v = linear(x, &layer.wv, &layer.bv)?;
    let attn = self_attention(&q, &k, &v, config.head_dim())?;
    linear(&attn, &layer.wb, &layer.bb)
}

/// Full-width MLP block: up projection, GELU, down projection.
pub fn reference_mlp<T: Scalar>(layer: &LayerWeights<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let up = linear(x, &layer.wd, &layer.bd)?;
    linear(&gelu(&up), &layer.we, &layer.be)
}

pub fn reference_layer<T: Scalar>(
    layer: &LayerWeights<T>,
    config: &ModelConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mha = reference_mha(layer, config, x)?;
    let h1 = connective(&mha, x, &layer.ln1_gamma, &layer.ln1_beta)?;
    let mlp = reference_mlp(layer, &h1)?;
    connective(&mlp, &h1, &layer.ln2_gamma, &layer.ln2_beta)
}

/// Single-device forward pass over pre-embedded hidden states, the oracle
/// every distributed result is compared against.
pub fn reference_forward<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.cols() != model.config.hidden {
        return Err(Error::Config(format!(
            "input width {} != hidden {}",
            input.cols(),
            model.config.hidden
        )));
    }
    if input.rows() > model.config.max_seq {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_seq {}",
            input.rows(),
            model.config.max_seq
        )));
    }
    let mut x = input.clone();
    for layer in &model.layers {
        x = reference_layer(layer, &model.config, &x)?;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

/// Weight bytes of one full MHA block: four h x h projections plus their
/// biases (3h for QKV, h for the output projection).
pub fn weight_bytes_mha(config: &ModelConfig) -> u64 {
    let h = config.hidden as u64;
    (4 * h * h + 4 * h) * config.dtype.size_bytes() as u64
}

/// Weight bytes of one full MLP block: h x 4h up and 4h x h down projections
/// plus their biases (4h and h).
pub fn weight_bytes_mlp(config: &ModelConfig) -> u64 {
    let h = config.hidden as u64;
    (8 * h * h + 5 * h) * config.dtype.size_bytes() as u64
}

/// Per-device weight-byte estimate under a plan:
/// `layers * (M_att * a_d / sum(A) + M_mlp * b_d / sum(B))`.
/// Activations are excluded; the dominant footprint is the weight matrices.
pub fn estimate_memory(config: &ModelConfig, plan: &PartitionPlan, device: usize) -> f64 {
    let total_heads: usize = plan.heads.iter().sum();
    let total_cols: usize = plan.mlp_cols.iter().sum();
    let m_att = weight_bytes_mha(config) as f64;
    let m_mlp = weight_bytes_mlp(config) as f64;
    let att_share = if total_heads == 0 { 0.0 } else { plan.heads[device] as f64 / total_heads as f64 };
    let mlp_share = if total_cols == 0 { 0.0 } else { plan.mlp_cols[device] as f64 / total_cols as f64 };
    config.num_layers as f64 * (m_att * att_share + m_mlp * mlp_share)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// magic "HMPW" | version u32 LE | header_len u32 LE | JSON header |
// raw little-endian tensor payloads in header order.

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: DType,
    /// Byte offset relative to the start of the payload section.
    offset: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn layer_tensor_names(h: usize, inter: usize) -> Vec<(&'static str, usize, usize)> {
    vec![
        ("wq", h, h),
        ("wk", h, h),
        ("wv", h, h),
        ("bq", 1, h),
        ("bk", 1, h),
        ("bv", 1, h),
        ("wb", h, h),
        ("bb", 1, h),
        ("wd", h, inter),
        ("bd", 1, inter),
        ("we", inter, h),
        ("be", 1, h),
        ("ln1_gamma", 1, h),
        ("ln1_beta", 1, h),
        ("ln2_gamma", 1, h),
        ("ln2_beta", 1, h),
    ]
}

fn layer_tensor_data<'a, T: Scalar>(
    layer: &'a LayerWeights<T>,
    name: &str,
) -> (&'a [T], usize, usize) {
    match name {
        "wq" => (layer.wq.data(), layer.wq.rows(), layer.wq.cols()),
        "wk" => (layer.wk.data(), layer.wk.rows(), layer.wk.cols()),
        "wv" => (layer.wv.data(), layer.wv.rows(), layer.wv.cols()),
        "bq" => (&layer.bq, 1, layer.bq.len()),
        "bk" => (&layer.bk, 1, layer.bk.len()),
        "bv" => (&layer.bv, 1, layer.bv.len()),
        "wb" => (layer.wb.data(), layer.wb.rows(), layer.wb.cols()),
        "bb" => (&layer.bb, 1, layer.bb.len()),
        "wd" => (layer.wd.data(), layer.wd.rows(), layer.wd.cols()),
        "bd" => (&layer.bd, 1, layer.bd.len()),
        "we" => (layer.we.data(), layer.we.rows(), layer.we.cols()),
        "be" => (&layer.be, 1, layer.be.len()),
        "ln1_gamma" => (&layer.ln1_gamma, 1, layer.ln1_gamma.len()),
        "ln1_beta" => (&layer.ln1_beta, 1, layer.ln1_beta.len()),
        "ln2_gamma" => (&layer.ln2_gamma, 1, layer.ln2_gamma.len()),
        "ln2_beta" => (&layer.ln2_beta, 1, layer.ln2_beta.len()),
        other => unreachable!("unknown tensor name {other}"),
    }
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let h = model.config.hidden;
    let inter = model.config.intermediate();
    let elem = T::BYTES as u64;

    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (li, _) in model.layers.iter().enumerate() {
        for (name, rows, cols) in layer_tensor_names(h, inter) {
            tensors.push(TensorEntry {
                name: format!("layer{li}.{name}"),
                rows,
                cols,
                dtype: T::DTYPE,
                offset,
            });
            offset += (rows * cols) as u64 * elem;
        }
    }
    let header = CheckpointHeader { config: model.config, tensors };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("encoding checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(12 + header_json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (li, layer) in model.layers.iter().enumerate() {
        let _ = li;
        for (name, _, _) in layer_tensor_names(h, inter) {
            let (data, _, _) = layer_tensor_data(layer, name);
            for &v in data {
                v.write_le(&mut out);
            }
        }
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Loads the checkpoint config without reading payloads.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (header, _) = parse_header(&bytes)?;
    Ok(header.config)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint shorter than its fixed header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected HMPW".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::Format(format!("decoding checkpoint header: {e}")))?;
    Ok((header, payload_start))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (header, payload_start) = parse_header(&bytes)?;
    let config = header.config;
    config.validate()?;
    check_dtype::<T>(&config)?;
    let payload = &bytes[payload_start..];
    let elem = T::BYTES;

    let h = config.hidden;
    let inter = config.intermediate();
    let expected = layer_tensor_names(h, inter);
    if header.tensors.len() != expected.len() * config.num_layers {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, expected {}",
            header.tensors.len(),
            expected.len() * config.num_layers
        )));
    }

    let read_tensor = |entry: &TensorEntry, rows: usize, cols: usize| -> Result<Vec<T>> {
        if entry.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {} has dtype {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        if entry.rows != rows || entry.cols != cols {
            return Err(Error::Format(format!(
                "tensor {} is {}x{}, expected {}x{}",
                entry.name, entry.rows, entry.cols, rows, cols
            )));
        }
        let start = entry.offset as usize;
        let len = rows * cols * elem;
        let end = start.checked_add(len).ok_or_else(|| {
            Error::Format(format!("tensor {} offset overflows", entry.name))
        })?;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {} payload truncated ({} of {} bytes present)",
                entry.name,
                payload.len().saturating_sub(start),
                len
            )));
        }
        Ok(payload[start..end].chunks_exact(elem).map(T::read_le).collect())
    };

    let mut layers = Vec::with_capacity(config.num_layers);
    let mut idx = 0;
    for li in 0..config.num_layers {
        let mut fetch = |name: &str, rows: usize, cols: usize| -> Result<Vec<T>> {
            let entry = &header.tensors[idx];
            let want = format!("layer{li}.{name}");
            if entry.name != want {
                return Err(Error::Format(format!(
                    "tensor {} out of order, expected {}",
                    entry.name, want
                )));
            }
            idx += 1;
            read_tensor(entry, rows, cols)
        };
        layers.push(LayerWeights {
            wq: Tensor::new(h, h, fetch("wq", h, h)?).map_err(Error::Shape)?,
            wk: Tensor::new(h, h, fetch("wk", h, h)?).map_err(Error::Shape)?,
            wv: Tensor::new(h, h, fetch("wv", h, h)?).map_err(Error::Shape)?,
            bq: fetch("bq", 1, h)?,
            bk: fetch("bk", 1, h)?,
            bv: fetch("bv", 1, h)?,
            wb: Tensor::new(h, h, fetch("wb", h, h)?).map_err(Error::Shape)?,
            bb: fetch("bb", 1, h)?,
            wd: Tensor::new(h, inter, fetch("wd", h, inter)?).map_err(Error::Shape)?,
            bd: fetch("bd", 1, inter)?,
            we: Tensor::new(inter, h, fetch("we", inter, h)?).map_err(Error::Shape)?,
            be: fetch("be", 1, h)?,
            ln1_gamma: fetch("ln1_gamma", 1, h)?,
            ln1_beta: fetch("ln1_beta", 1, h)?,
            ln2_gamma: fetch("ln2_gamma", 1, h)?,
            ln2_beta: fetch("ln2_beta", 1, h)?,
        });
    }
    Ok(Model { config, layers })
}

/// Deterministic synthetic activations at the model's width.
pub fn synthetic_input<T: Scalar>(config: &ModelConfig, seq: usize, seed: u64) -> Tensor<T> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(seq, config.hidden, |_, _| T::from_f64(rng.normal(0.0, 1.0)))
}
