//! Forward masking process and the blockwise NELBO training objective,
//! driving the SFT stage via single-pass expanded forwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blockmask::{self, BlockLayout, RepeatMode};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tasks::{TaskSample, Vocab};
use crate::tensor::{AdamConfig, AdamW, Tape, Var};

/// Linear keep-probability schedule with 1/t ELBO weighting, the standard
/// masked-diffusion choice. The weight is clamped below `w_clamp_t` to bound
/// variance.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionSchedule {
    pub w_clamp_t: f32,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule { w_clamp_t: 0.02 }
    }
}

impl DiffusionSchedule {
    /// Keep probability alpha(t) = 1 - t.
    pub fn alpha(&self, t: f32) -> f32 {
        1.0 - t
    }

    /// Loss weight w(t) = 1 / max(t, clamp).
    pub fn weight(&self, t: f32) -> f32 {
        1.0 / t.max(self.w_clamp_t)
    }
}

/// Masks each token independently with probability 1 - alpha(t). If t > 0
/// and nothing got masked, one uniformly chosen position is force-masked so
/// a loss target exists.
pub fn noise_block(
    block: &[u32],
    t: f32,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<bool>) {
    let p_mask = 1.0 - schedule.alpha(t);
    let mut noisy = block.to_vec();
    let mut indicator = vec![false; block.len()];
    for i in 0..block.len() {
        if rng.gen::<f32>() < p_mask {
            noisy[i] = Vocab::MASK;
            indicator[i] = true;
        }
    }
    if t > 0.0 && !indicator.iter().any(|&m| m) {
        let i = rng.gen_range(0..block.len());
        noisy[i] = Vocab::MASK;
        indicator[i] = true;
    }
    (noisy, indicator)
}

/// One training sequence after forward noising: clean and noisy tokens plus
/// the per-block noise level (prompt blocks stay at t = 0).
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub layout: BlockLayout,
    pub clean: Vec<u32>,
    pub noisy: Vec<u32>,
    pub block_t: Vec<f32>,
}

/// Samples t ~ Uniform(0, 1] per output block and applies the forward
/// process.
pub fn make_noisy_sample(
    layout: BlockLayout,
    clean: &[u32],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<NoisySample> {
    if clean.len() != layout.total_len() {
        return Err(Error::Layout(format!(
            "sequence length {} does not match layout {}",
            clean.len(),
            layout.total_len()
        )));
    }
    let bsz = layout.block_size;
    let mut noisy = clean.to_vec();
    let mut block_t = vec![0.0; layout.total_blocks()];
    for b in layout.prompt_blocks..layout.total_blocks() {
        let t = 1.0 - rng.gen::<f32>(); // (0, 1]
        block_t[b] = t;
        let (nb, _) = noise_block(&clean[b * bsz..(b + 1) * bsz], t, schedule, rng);
        noisy[b * bsz..(b + 1) * bsz].copy_from_slice(&nb);
    }
    Ok(NoisySample { layout, clean: clean.to_vec(), noisy, block_t })
}

/// Pads a prompt to a whole number of blocks by left-padding with PAD, so
/// the block grid stays uniform.
pub fn pad_prompt(prompt: &[u32], block_size: usize) -> Vec<u32> {
    let rem = prompt.len() % block_size;
    let pad = if rem == 0 { 0 } else { block_size - rem };
    let mut out = vec![Vocab::PAD; pad];
    out.extend_from_slice(prompt);
    out
}

/// Full clean training sequence for a task sample: left-padded prompt plus
/// the worked solution padded with PAD up to a block boundary.
pub fn training_sequence(sample: &TaskSample, block_size: usize) -> (BlockLayout, Vec<u32>) {
    let prompt = pad_prompt(&sample.prompt_tokens(), block_size);
    let mut target = sample.target_tokens();
    while target.len() % block_size != 0 {
        target.push(Vocab::PAD);
    }
    let layout = BlockLayout::new(block_size, prompt.len() / block_size, target.len() / block_size)
        .expect("non-empty target");
    let mut seq = prompt;
    seq.extend_from_slice(&target);
    (layout, seq)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SftLossStats {
    pub masked_tokens: usize,
    pub total_output_tokens: usize,
}

/// Blockwise NELBO over a batch: one expanded forward per sample,
/// cross-entropy on masked positions weighted by w(t) of the owning block,
/// normalized as the weighted mean over masked tokens.
pub fn sft_loss(
    params: &ModelParams,
    tape: &Tape,
    batch: &[NoisySample],
    schedule: &DiffusionSchedule,
) -> Result<(Var, SftLossStats)> {
    let (loss, _, stats) = sft_loss_with_vars(params, tape, batch, schedule)?;
    Ok((loss, stats))
}

/// As [`sft_loss`], additionally returning the parameter leaves so the
/// caller can collect gradients by name.
pub fn sft_loss_with_vars(
    params: &ModelParams,
    tape: &Tape,
    batch: &[NoisySample],
    schedule: &DiffusionSchedule,
) -> Result<(Var, model::ParamVars, SftLossStats)> {
    let pv = params.leaves(tape);
    let (loss, stats) = sft_loss_from_vars(&params.config, &pv, tape, batch, schedule)?;
    Ok((loss, pv, stats))
}

/// Loss over already-registered parameter leaves.
pub fn sft_loss_from_vars(
    cfg: &ModelConfig,
    pv: &model::ParamVars,
    tape: &Tape,
    batch: &[NoisySample],
    schedule: &DiffusionSchedule,
) -> Result<(Var, SftLossStats)> {
    let mut weighted_terms: Vec<Var> = Vec::new();
    let mut stats = SftLossStats::default();
    let mut weight_total = 0.0f32;
    for sample in batch {
        stats.total_output_tokens += sample.layout.output_len();
        let exp = blockmask::sft_repeat_expansion(
            &sample.layout,
            &sample.clean,
            &sample.noisy,
            cfg.mask_token_id,
            RepeatMode::FullRepeat,
        )?;
        let loss_rows = exp.loss_indices();
        if loss_rows.is_empty() {
            continue;
        }
        stats.masked_tokens += loss_rows.len();
        let hidden = model::forward_hidden(cfg, pv, tape, &exp.tokens, &exp.positions, &exp.mask)?;
        let logits = model::logits_at(pv, tape, &hidden, Some(&loss_rows))?;
        let targets: Vec<u32> = loss_rows.iter().map(|&i| sample.clean[exp.positions[i]]).collect();
        let weights: Vec<f32> = loss_rows
            .iter()
            .map(|&i| schedule.weight(sample.block_t[sample.layout.block_of(exp.positions[i])]))
            .collect();
        weight_total += weights.iter().sum::<f32>();
        // weighted sum here; single normalization across the batch below
        weighted_terms.push(tape.softmax_cross_entropy(&logits, &targets, &weights, false)?);
    }
    let Some(mut total) = weighted_terms.pop() else {
        return Ok((Var::constant(crate::tensor::Tensor::scalar(0.0)), stats));
    };
    for term in &weighted_terms {
        total = tape.add(&total, term)?;
    }
    Ok((tape.scale(&total, 1.0 / weight_total), stats))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Cosine-schedule floor; the lr anneals from `lr` to `lr_min`.
    #[serde(default)]
    pub lr_min: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for SftConfig {
    /// Calibrated for the 3-digit addition pipeline on one CPU core: the lr
    /// floor stops the cosine anneal while the model is still improving, which
    /// leaves headroom for the RL stage to continue the climb.
    fn default() -> Self {
        SftConfig {
            steps: 4200,
            batch_size: 8,
            lr: 1e-3,
            lr_min: 2e-4,
            weight_decay: 0.0,
            seed: 0,
            log_every: 10,
        }
    }
}

/// One metrics row per logged step.
#[derive(Debug, Clone)]
pub struct SftMetric {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub masked_frac: f32,
    pub wall_ms: f64,
}

pub fn cosine_lr(lr_max: f32, step: usize, total_steps: usize) -> f32 {
    let frac = step as f32 / total_steps.max(1) as f32;
    lr_max * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos())
}

/// Runs sample-t -> noise -> expanded loss -> AdamW over the dataset with a
/// cosine annealing learning-rate schedule.
pub fn sft_train(
    model_cfg: &ModelConfig,
    cfg: &SftConfig,
    dataset: &[TaskSample],
    mut params: ModelParams,
) -> Result<(ModelParams, Vec<SftMetric>)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty SFT dataset".into()));
    }
    let schedule = DiffusionSchedule::default();
    let mut rng = crate::fdcheck::rng(cfg.seed);
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let t0 = std::time::Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let sample = &dataset[rng.gen_range(0..dataset.len())];
            let (layout, clean) = training_sequence(sample, model_cfg.block_size);
            batch.push(make_noisy_sample(layout, &clean, &schedule, &mut rng)?);
        }
        let tape = Tape::new();
        let (loss, pv, stats) = sft_loss_with_vars(&params, &tape, &batch, &schedule)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("SFT loss at step {step}")));
        }
        let grads = tape.backward(&loss)?;
        let grad_map = params.leaf_grads(&pv, &grads);
        opt.cfg.lr = cfg.lr_min + cosine_lr(cfg.lr - cfg.lr_min, step, cfg.steps);
        opt.step(&mut params.tensors, &grad_map)?;

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            metrics.push(SftMetric {
                step,
                loss: loss_val,
                lr: opt.cfg.lr,
                masked_frac: stats.masked_tokens as f32 / stats.total_output_tokens.max(1) as f32,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok((params, metrics))
}
