//! The toy blockwise diffusion transformer: parameter layout, differentiable
//! forward over (tokens, positions, mask), cached block inference, and the
//! checkpoint format.
//!
//! Position embeddings are looked up from caller-supplied indices, so
//! block-expanded copies of a block reuse their original sequence positions.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockmask::MaskSpec;
use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"BDLM1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub block_size: usize,
    pub mask_token_id: u32,
    pub pad_token_id: u32,
    pub bos_token_id: u32,
    pub eos_token_id: u32,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on a CPU.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 512,
            block_size: 8,
            mask_token_id: crate::tasks::Vocab::MASK,
            pad_token_id: crate::tasks::Vocab::PAD,
            bos_token_id: crate::tasks::Vocab::BOS,
            eos_token_id: crate::tasks::Vocab::EOS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return Err(Error::Config("mask_token_id >= vocab_size".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Exact parameter names and shapes for this config.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.d_model;
        let mut m = BTreeMap::new();
        m.insert("tok_emb".into(), vec![self.vocab_size, d]);
        m.insert("pos_emb".into(), vec![self.max_seq_len, d]);
        for l in 0..self.n_layers {
            for (n, s) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w1", vec![d, self.mlp_hidden()]),
                ("mlp.b1", vec![self.mlp_hidden()]),
                ("mlp.w2", vec![self.mlp_hidden(), d]),
                ("mlp.b2", vec![d]),
            ] {
                m.insert(format!("layer{l}.{n}"), s);
            }
        }
        m.insert("ln_f.gain".into(), vec![d]);
        m.insert("ln_f.bias".into(), vec![d]);
        m.insert("head.w".into(), vec![d, self.vocab_size]);
        m.insert("head.b".into(), vec![self.vocab_size]);
        m
    }

    pub fn param_count(&self) -> usize {
        self.expected_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Named dense parameter tensors plus a monotonically increasing version for
/// hot swap.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ParamMap,
    pub version: u64,
}

fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Deterministic initialization from the config seed. Gains start at one,
/// every bias (including the output head) at zero.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = ParamMap::new();
    for (name, shape) in cfg.expected_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            // every bias, including the output head
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal(&mut rng, 0.02)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams { config: cfg.clone(), tensors, version: 1 })
}

/// Per-tape leaf vars for every parameter tensor.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Replaces the var for one parameter, e.g. to differentiate wrt an
    /// externally registered leaf.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

impl ModelParams {
    pub fn leaves(&self, tape: &Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn leaf_grads(
        &self,
        pv: &ParamVars,
        grads: &crate::tensor::Gradients,
    ) -> BTreeMap<String, Tensor> {
        self.tensors
            .keys()
            .filter_map(|k| grads.wrt(pv.get(k)).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Hidden states `[len, d_model]` before the output head.
pub fn forward_hidden(
    cfg: &ModelConfig,
    pv: &ParamVars,
    tape: &Tape,
    tokens: &[u32],
    positions: &[usize],
    mask: &MaskSpec,
) -> Result<Var> {
    if tokens.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} tokens vs {} positions",
            tokens.len(),
            positions.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_seq_len) {
        return Err(Error::Index(format!("position {p} >= max_seq_len {}", cfg.max_seq_len)));
    }
    if mask.query_len() != tokens.len() || mask.key_len() != tokens.len() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not cover sequence of {}",
            mask.query_len(),
            mask.key_len(),
            tokens.len()
        )));
    }
    let tok_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.gather_rows(pv.get("tok_emb"), &tok_idx)?;
    let pos = tape.gather_rows(pv.get("pos_emb"), positions)?;
    let mut x = tape.add(&tok, &pos)?;

    for l in 0..cfg.n_layers {
        let p = |n: &str| pv.get(&format!("layer{l}.{n}"));
        let h = tape.layer_norm(&x, p("ln1.gain"), p("ln1.bias"), 1e-5)?;
        let q = tape.add_bias(&tape.matmul(&h, p("attn.wq"))?, p("attn.bq"))?;
        let k = tape.add_bias(&tape.matmul(&h, p("attn.wk"))?, p("attn.bk"))?;
        let v = tape.add_bias(&tape.matmul(&h, p("attn.wv"))?, p("attn.bv"))?;
        let attn = tape.masked_attention(&q, &k, &v, cfg.n_heads, mask)?;
        let attn = tape.add_bias(&tape.matmul(&attn, p("attn.wo"))?, p("attn.bo"))?;
        x = tape.add(&x, &attn)?;
        let h2 = tape.layer_norm(&x, p("ln2.gain"), p("ln2.bias"), 1e-5)?;
        let m1 = tape.gelu(&tape.add_bias(&tape.matmul(&h2, p("mlp.w1"))?, p("mlp.b1"))?);
        let m2 = tape.add_bias(&tape.matmul(&m1, p("mlp.w2"))?, p("mlp.b2"))?;
        x = tape.add(&x, &m2)?;
    }
    tape.layer_norm(&x, pv.get("ln_f.gain"), pv.get("ln_f.bias"), 1e-5)
}

/// Vocabulary logits for a subset of sequence rows (all rows if `rows` is
/// None). Restricting to loss rows keeps the head projection cheap.
pub fn logits_at(
    pv: &ParamVars,
    tape: &Tape,
    hidden: &Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let h = match rows {
        Some(rows) => tape.gather_rows(hidden, rows)?,
        None => hidden.clone(),
    };
    tape.add_bias(&tape.matmul(&h, pv.get("head.w"))?, pv.get("head.b"))
}

/// Full forward: logits for every input position.
pub fn forward(
    params: &ModelParams,
    tape: &Tape,
    tokens: &[u32],
    positions: &[usize],
    mask: &MaskSpec,
) -> Result<Var> {
    let pv = params.leaves(tape);
    let hidden = forward_hidden(&params.config, &pv, tape, tokens, positions, mask)?;
    logits_at(&pv, tape, &hidden, None)
}

// ── cached block inference ───────────────────────────────────────────

/// Per-layer key/value tensors of committed (clean) positions.
pub struct KvCache {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
    committed_len: usize,
}

/// Key/value rows of one forwarded block, held until the caller commits it.
pub struct PendingBlock {
    start: usize,
    len: usize,
    layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            layers: vec![(Vec::new(), Vec::new()); cfg.n_layers],
            committed_len: 0,
        }
    }

    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    /// Appends a forwarded block. The block must start exactly at the
    /// committed length; recommitting is an error.
    pub fn commit(&mut self, pending: PendingBlock) -> Result<()> {
        if pending.start != self.committed_len {
            return Err(Error::Layout(format!(
                "block starting at {} overlaps or skips committed region of length {}",
                pending.start, self.committed_len
            )));
        }
        for (slot, (k, v)) in self.layers.iter_mut().zip(pending.layers) {
            slot.0.extend_from_slice(&k);
            slot.1.extend_from_slice(&v);
        }
        self.committed_len += pending.len;
        Ok(())
    }
}

fn ln_rows(x: &mut [f32], n: usize, gain: &[f32], bias: &[f32]) {
    let m = x.len() / n;
    for r in 0..m {
        let row = &mut x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for c in 0..n {
            row[c] = (row[c] - mean) * inv * gain[c] + bias[c];
        }
    }
}

fn linear(x: &[f32], m: usize, k: usize, w: &[f32], n: usize, b: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    crate::tensor::raw_sgemm(m, k, n, 1.0, x, k as isize, 1, w, n as isize, 1, 0.0, &mut out,
                             n as isize, 1);
    for r in 0..m {
        for c in 0..n {
            out[r * n + c] += b[c];
        }
    }
    out
}

fn gelu_inplace(x: &mut [f32]) {
    const C: f32 = 0.797_884_6;
    const B: f32 = 0.044_715;
    for v in x {
        *v = 0.5 * *v * (1.0 + (C * (*v + B * *v * *v * *v)).tanh());
    }
}

/// Forward of one block against the cache, without gradient tracking.
/// Logits match an uncached forward over prefix + block within 1e-5.
pub fn forward_cached(
    params: &ModelParams,
    cache: &KvCache,
    block_tokens: &[u32],
    block_positions: &[usize],
    intra_mask: &MaskSpec,
) -> Result<(Tensor, PendingBlock)> {
    let cfg = &params.config;
    let bsz = block_tokens.len();
    if block_positions.len() != bsz || bsz == 0 {
        return Err(Error::Shape("block tokens/positions length mismatch".into()));
    }
    for (i, &p) in block_positions.iter().enumerate() {
        if p != cache.committed_len + i {
            return Err(Error::Layout(format!(
                "block position {p} not contiguous after committed length {}",
                cache.committed_len
            )));
        }
        if p >= cfg.max_seq_len {
            return Err(Error::Index(format!("position {p} >= max_seq_len")));
        }
    }
    if intra_mask.query_len() != bsz || intra_mask.key_len() != bsz {
        return Err(Error::Shape("intra_mask must be block_len x block_len".into()));
    }

    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let lc = cache.committed_len;
    let g = |name: &str| params.tensors[name].data();

    let mut x = vec![0.0; bsz * d];
    for (i, (&t, &p)) in block_tokens.iter().zip(block_positions).enumerate() {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Index(format!("token {t} >= vocab_size")));
        }
        let te = &g("tok_emb")[t as usize * d..(t as usize + 1) * d];
        let pe = &g("pos_emb")[p * d..(p + 1) * d];
        for c in 0..d {
            x[i * d + c] = te[c] + pe[c];
        }
    }

    let mut pending = PendingBlock { start: lc, len: bsz, layers: Vec::with_capacity(cfg.n_layers) };
    for l in 0..cfg.n_layers {
        let p = |n: &str| g(&format!("layer{l}.{n}"));
        let mut h = x.clone();
        ln_rows(&mut h, d, p("ln1.gain"), p("ln1.bias"));
        let q = linear(&h, bsz, d, p("attn.wq"), d, p("attn.bq"));
        let k_new = linear(&h, bsz, d, p("attn.wk"), d, p("attn.bk"));
        let v_new = linear(&h, bsz, d, p("attn.wv"), d, p("attn.bv"));
        let (k_cache, v_cache) = &cache.layers[l];
        let lk = lc + bsz;

        let mut attn = vec![0.0; bsz * d];
        for h_idx in 0..cfg.n_heads {
            let qo = h_idx * dh;
            let mut scores = vec![f32::NEG_INFINITY; bsz * lk];
            for i in 0..bsz {
                for j in 0..lk {
                    let kr = if j < lc {
                        &k_cache[j * d + qo..j * d + qo + dh]
                    } else {
                        if !intra_mask.visible(i, j - lc) {
                            continue;
                        }
                        &k_new[(j - lc) * d + qo..(j - lc) * d + qo + dh]
                    };
                    let qr = &q[i * d + qo..i * d + qo + dh];
                    scores[i * lk + j] =
                        scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>();
                }
            }
            for i in 0..bsz {
                let row = &mut scores[i * lk..(i + 1) * lk];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if max == f32::NEG_INFINITY {
                    return Err(Error::Mask(format!("block query {i} has no visible keys")));
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    if *s == f32::NEG_INFINITY {
                        *s = 0.0;
                    } else {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                }
                let inv = 1.0 / z;
                let out = &mut attn[i * d + qo..i * d + qo + dh];
                for (j, &w) in row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let vr = if j < lc {
                        &v_cache[j * d + qo..j * d + qo + dh]
                    } else {
                        &v_new[(j - lc) * d + qo..(j - lc) * d + qo + dh]
                    };
                    let w = w * inv;
                    for c in 0..dh {
                        out[c] += w * vr[c];
                    }
                }
            }
        }
        let attn = linear(&attn, bsz, d, p("attn.wo"), d, p("attn.bo"));
        for i in 0..bsz * d {
            x[i] += attn[i];
        }
        let mut h2 = x.clone();
        ln_rows(&mut h2, d, p("ln2.gain"), p("ln2.bias"));
        let mut m1 = linear(&h2, bsz, d, p("mlp.w1"), cfg.mlp_hidden(), p("mlp.b1"));
        gelu_inplace(&mut m1);
        let m2 = linear(&m1, bsz, cfg.mlp_hidden(), p("mlp.w2"), d, p("mlp.b2"));
        for i in 0..bsz * d {
            x[i] += m2[i];
        }
        pending.layers.push((k_new, v_new));
    }
    ln_rows(&mut x, d, g("ln_f.gain"), g("ln_f.bias"));
    let logits = linear(&x, bsz, d, g("head.w"), cfg.vocab_size, g("head.b"));
    Ok((Tensor::new(vec![bsz, cfg.vocab_size], logits)?, pending))
}

// ── checkpoint format ────────────────────────────────────────────────

/// Serializes config + tensors: magic "BDLM1", u32 LE config JSON length,
/// config JSON, then per tensor in sorted-name order: u32 name length, name,
/// u32 rank, u64 LE dims, little-endian f32 data.
pub fn params_to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let meta = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (name, tensor) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = bytes;
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut len4 = [0u8; 4];
    read_exact(&mut r, &mut len4)?;
    let mut meta = vec![0u8; u32::from_le_bytes(len4) as usize];
    read_exact(&mut r, &mut meta)?;
    let config: ModelConfig = serde_json::from_slice(&meta)
        .map_err(|e| Error::Format(format!("bad config metadata: {e}")))?;
    config.validate().map_err(|e| Error::Format(format!("invalid config: {e}")))?;

    let expected = config.expected_shapes();
    let mut tensors = ParamMap::new();
    let mut last_name = String::new();
    while !r.is_empty() {
        read_exact(&mut r, &mut len4)?;
        let mut name = vec![0u8; u32::from_le_bytes(len4) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("bad tensor name".into()))?;
        if name <= last_name && !last_name.is_empty() {
            return Err(Error::Format("tensors not in sorted-name order".into()));
        }
        read_exact(&mut r, &mut len4)?;
        let rank = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut dim8 = [0u8; 8];
        for _ in 0..rank {
            read_exact(&mut r, &mut dim8)?;
            shape.push(u64::from_le_bytes(dim8) as usize);
        }
        match expected.get(&name) {
            None => return Err(Error::Format(format!("unexpected tensor {name}"))),
            Some(s) if *s != shape => {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {shape:?}, expected {s:?}"
                )))
            }
            _ => {}
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f4 = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut f4)?;
            data.push(f32::from_le_bytes(f4));
        }
        last_name = name.clone();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config requires {}",
            tensors.len(),
            expected.len()
        )));
    }
    Ok(ModelParams { config, tensors, version: 1 })
}

pub fn save_checkpoint(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    let bytes = params_to_bytes(params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    params_from_bytes(&bytes)
}
