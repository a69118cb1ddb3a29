//! Attention-visibility relations for blockwise diffusion training and inference.
//!
//! Three mask families are built here: the block-causal inference mask, the
//! single-pass SFT "repeat" expansion, and the per-decoding-step trace-replay
//! expansion used by RL. Each construction is paired with an independently
//! written pointwise rule ([`visibility_oracle`]) that tests compare against.

use crate::error::{Error, Result};

/// Block grid of a sequence: prompt blocks followed by output blocks,
/// all of size `block_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_size: usize,
    pub prompt_blocks: usize,
    pub output_blocks: usize,
}

impl BlockLayout {
    pub fn new(block_size: usize, prompt_blocks: usize, output_blocks: usize) -> Result<Self> {
        if block_size == 0 || output_blocks == 0 {
            return Err(Error::Layout(format!(
                "block_size ({block_size}) and output_blocks ({output_blocks}) must be >= 1"
            )));
        }
        Ok(BlockLayout { block_size, prompt_blocks, output_blocks })
    }

    pub fn total_blocks(&self) -> usize {
        self.prompt_blocks + self.output_blocks
    }

    pub fn total_len(&self) -> usize {
        self.total_blocks() * self.block_size
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_blocks * self.block_size
    }

    pub fn output_len(&self) -> usize {
        self.output_blocks * self.block_size
    }

    /// Block index owning sequence position `pos`.
    pub fn block_of(&self, pos: usize) -> usize {
        pos / self.block_size
    }
}

/// A boolean visibility relation over (query, key) pairs, stored as a
/// row-major bitmatrix.
#[derive(Clone, PartialEq, Eq)]
pub struct MaskSpec {
    query_len: usize,
    key_len: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl MaskSpec {
    /// Builds the bitmatrix from a predicate. Fails if any query row ends up
    /// with zero visible keys.
    pub fn from_fn(
        query_len: usize,
        key_len: usize,
        visible: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let words_per_row = key_len.div_ceil(64).max(1);
        let mut bits = vec![0u64; query_len * words_per_row];
        for i in 0..query_len {
            let row = &mut bits[i * words_per_row..(i + 1) * words_per_row];
            let mut any = false;
            for j in 0..key_len {
                if visible(i, j) {
                    row[j / 64] |= 1 << (j % 64);
                    any = true;
                }
            }
            if !any {
                return Err(Error::Mask(format!("query row {i} has no visible keys")));
            }
        }
        Ok(MaskSpec { query_len, key_len, words_per_row, bits })
    }

    /// All pairs visible.
    pub fn all_visible(query_len: usize, key_len: usize) -> Self {
        Self::from_fn(query_len, key_len, |_, _| true).expect("non-degenerate")
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    #[inline]
    pub fn visible(&self, query: usize, key: usize) -> bool {
        debug_assert!(query < self.query_len && key < self.key_len);
        self.bits[query * self.words_per_row + key / 64] >> (key % 64) & 1 == 1
    }

    /// Raw bit words of one query row (little-endian bit order within words).
    pub fn row_words(&self, query: usize) -> &[u64] {
        &self.bits[query * self.words_per_row..(query + 1) * self.words_per_row]
    }

    /// Renders the relation as a PBM ("P1") text grid, 1 = visible.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.key_len, self.query_len);
        for i in 0..self.query_len {
            for j in 0..self.key_len {
                out.push(if self.visible(i, j) { '1' } else { '0' });
                if j + 1 < self.key_len {
                    out.push(' ');
                }
            }
            out.push('\n');
        }
        out
    }
}

impl std::fmt::Debug for MaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MaskSpec({}x{})", self.query_len, self.key_len)
    }
}

/// Role of one token in an expanded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyTag {
    Clean,
    /// Masked copy carrying loss; `step` is the decoding-step index it
    /// replays (0 for the single SFT copy).
    Noisy { step: usize },
}

/// A block-expanded token sequence plus everything a single forward pass
/// needs: original positions, loss mask, and the visibility relation.
#[derive(Debug, Clone)]
pub struct ExpandedSequence {
    pub tokens: Vec<u32>,
    /// Original sequence position of each expanded token; noisy copies reuse
    /// their source block's positions.
    pub positions: Vec<usize>,
    pub copy_tag: Vec<CopyTag>,
    pub loss_mask: Vec<bool>,
    pub mask: MaskSpec,
}

impl ExpandedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn loss_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.loss_mask[i]).collect()
    }
}

/// How the SFT expansion repeats the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepeatMode {
    /// Repeat prompt and output blockwise, clean/noisy interleaved.
    #[default]
    FullRepeat,
    /// Keep prompt single, append one noisy copy per output block at the end.
    /// Comparison mode for the mask benchmark.
    OutputRepeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    block: usize,
    kind: CopyTag,
}

/// One decoding step of the trace used by replay expansion: which absolute
/// sequence positions were decoded, in which block.
#[derive(Debug, Clone)]
pub struct StepSpec {
    pub block: usize,
    pub positions: Vec<usize>,
}

/// Segment-level visibility: the single rule all constructions share.
/// A clean copy of block b sees clean copies of blocks <= b; a noisy copy
/// sees clean copies of strictly earlier blocks plus itself.
fn segment_visible(segments: &[Segment], si: usize, sj: usize) -> bool {
    let (a, b) = (segments[si], segments[sj]);
    match a.kind {
        CopyTag::Clean => b.kind == CopyTag::Clean && b.block <= a.block,
        CopyTag::Noisy { .. } => {
            si == sj || (b.kind == CopyTag::Clean && b.block < a.block)
        }
    }
}

fn build_mask(segments: &[Segment], block_size: usize) -> Result<MaskSpec> {
    let len = segments.len() * block_size;
    MaskSpec::from_fn(len, len, |i, j| {
        segment_visible(segments, i / block_size, j / block_size)
    })
}

/// Block-causal mask over the plain (unexpanded) sequence: every token sees
/// its own whole block plus all earlier blocks.
pub fn inference_mask(layout: &BlockLayout, active_block: usize) -> Result<MaskSpec> {
    if active_block >= layout.total_blocks() {
        return Err(Error::Layout(format!(
            "active_block {active_block} out of range ({} blocks)",
            layout.total_blocks()
        )));
    }
    let len = layout.total_len();
    MaskSpec::from_fn(len, len, |i, j| layout.block_of(j) <= layout.block_of(i))
}

/// Blockwise repeat expansion for single-pass SFT. `noisy_tokens` must be
/// `clean_tokens` with some positions replaced by `mask_token`.
pub fn sft_repeat_expansion(
    layout: &BlockLayout,
    clean_tokens: &[u32],
    noisy_tokens: &[u32],
    mask_token: u32,
    mode: RepeatMode,
) -> Result<ExpandedSequence> {
    let total = layout.total_len();
    if clean_tokens.len() != total || noisy_tokens.len() != total {
        return Err(Error::Layout(format!(
            "sequence length {} (clean) / {} (noisy) does not match layout length {}",
            clean_tokens.len(),
            noisy_tokens.len(),
            total
        )));
    }
    for (pos, (&c, &n)) in clean_tokens.iter().zip(noisy_tokens).enumerate() {
        if n != c && n != mask_token {
            return Err(Error::Layout(format!(
                "noisy token at {pos} is neither clean nor mask_token"
            )));
        }
    }

    let mut segments = Vec::new();
    match mode {
        RepeatMode::FullRepeat => {
            for b in 0..layout.total_blocks() {
                segments.push(Segment { block: b, kind: CopyTag::Clean });
                segments.push(Segment { block: b, kind: CopyTag::Noisy { step: 0 } });
            }
        }
        RepeatMode::OutputRepeat => {
            for b in 0..layout.total_blocks() {
                segments.push(Segment { block: b, kind: CopyTag::Clean });
            }
            for b in layout.prompt_blocks..layout.total_blocks() {
                segments.push(Segment { block: b, kind: CopyTag::Noisy { step: 0 } });
            }
        }
    }

    let bsz = layout.block_size;
    let mut tokens = Vec::with_capacity(segments.len() * bsz);
    let mut positions = Vec::with_capacity(segments.len() * bsz);
    let mut copy_tag = Vec::with_capacity(segments.len() * bsz);
    let mut loss_mask = Vec::with_capacity(segments.len() * bsz);
    for seg in &segments {
        for off in 0..bsz {
            let pos = seg.block * bsz + off;
            positions.push(pos);
            copy_tag.push(seg.kind);
            match seg.kind {
                CopyTag::Clean => {
                    tokens.push(clean_tokens[pos]);
                    loss_mask.push(false);
                }
                CopyTag::Noisy { .. } => {
                    tokens.push(noisy_tokens[pos]);
                    // prompt copies never carry loss
                    loss_mask.push(
                        noisy_tokens[pos] == mask_token && seg.block >= layout.prompt_blocks,
                    );
                }
            }
        }
    }

    let mask = build_mask(&segments, bsz)?;
    Ok(ExpandedSequence { tokens, positions, copy_tag, loss_mask, mask })
}

/// Expansion replaying an exact decoding trace: one noisy copy per decoding
/// step holding the block's pre-step state, with loss exactly on the tokens
/// decoded at that step.
///
/// `tokens` is the final decoded sequence over the layout; `steps` must
/// partition the output positions, in decode order.
pub fn trace_replay_expansion(
    layout: &BlockLayout,
    tokens: &[u32],
    steps: &[StepSpec],
    mask_token: u32,
) -> Result<ExpandedSequence> {
    let total = layout.total_len();
    if tokens.len() != total {
        return Err(Error::Layout(format!(
            "sequence length {} does not match layout length {total}",
            tokens.len()
        )));
    }
    let mut decoded_at = vec![None; total];
    for (t, step) in steps.iter().enumerate() {
        if step.block < layout.prompt_blocks || step.block >= layout.total_blocks() {
            return Err(Error::Trace(format!("step {t} targets non-output block {}", step.block)));
        }
        if step.positions.is_empty() {
            return Err(Error::Trace(format!("step {t} decodes no positions")));
        }
        for &pos in &step.positions {
            if layout.block_of(pos) != step.block {
                return Err(Error::Trace(format!(
                    "step {t}: position {pos} outside block {}",
                    step.block
                )));
            }
            if decoded_at[pos].replace(t).is_some() {
                return Err(Error::Trace(format!("position {pos} decoded twice")));
            }
        }
    }
    for pos in layout.prompt_len()..total {
        if decoded_at[pos].is_none() {
            return Err(Error::Trace(format!("position {pos} never decoded")));
        }
    }

    // Per output block, its steps in decode order.
    let mut block_steps: Vec<Vec<usize>> = vec![Vec::new(); layout.total_blocks()];
    for (t, step) in steps.iter().enumerate() {
        block_steps[step.block].push(t);
    }

    let bsz = layout.block_size;
    let mut segments = Vec::new();
    for b in 0..layout.total_blocks() {
        segments.push(Segment { block: b, kind: CopyTag::Clean });
    }
    let mut seg_step: Vec<usize> = Vec::new(); // global step index per noisy segment
    for b in layout.prompt_blocks..layout.total_blocks() {
        for (local, &t) in block_steps[b].iter().enumerate() {
            segments.push(Segment { block: b, kind: CopyTag::Noisy { step: local } });
            seg_step.push(t);
        }
    }

    let clean_count = layout.total_blocks();
    let mut out_tokens = Vec::with_capacity(segments.len() * bsz);
    let mut positions = Vec::with_capacity(segments.len() * bsz);
    let mut copy_tag = Vec::with_capacity(segments.len() * bsz);
    let mut loss_mask = Vec::with_capacity(segments.len() * bsz);
    for (si, seg) in segments.iter().enumerate() {
        for off in 0..bsz {
            let pos = seg.block * bsz + off;
            positions.push(pos);
            copy_tag.push(seg.kind);
            match seg.kind {
                CopyTag::Clean => {
                    out_tokens.push(tokens[pos]);
                    loss_mask.push(false);
                }
                CopyTag::Noisy { .. } => {
                    let t = seg_step[si - clean_count];
                    // pre-step state: only tokens decoded strictly earlier are revealed
                    let revealed = decoded_at[pos].map(|d| d < t).unwrap_or(false);
                    out_tokens.push(if revealed { tokens[pos] } else { mask_token });
                    loss_mask.push(decoded_at[pos] == Some(t));
                }
            }
        }
    }

    let mask = build_mask(&segments, bsz)?;
    Ok(ExpandedSequence { tokens: out_tokens, positions, copy_tag, loss_mask, mask })
}

/// Which visibility rule [`visibility_oracle`] should express.
#[derive(Debug, Clone)]
pub enum MaskKind {
    Inference { active_block: usize },
    SftRepeat { mode: RepeatMode },
    /// `steps_per_block[k]` = number of decoding steps of output block k.
    TraceReplay { steps_per_block: Vec<usize> },
}

/// Pointwise reference implementation of the three visibility rules, written
/// from the block arithmetic rather than the segment table, for use as an
/// independent oracle.
pub fn visibility_oracle(
    kind: MaskKind,
    layout: &BlockLayout,
) -> Box<dyn Fn(usize, usize) -> bool> {
    let bsz = layout.block_size;
    let prompt_blocks = layout.prompt_blocks;
    let total_blocks = layout.total_blocks();
    match kind {
        MaskKind::Inference { .. } => {
            Box::new(move |i, j| j / bsz <= i / bsz)
        }
        MaskKind::SftRepeat { mode: RepeatMode::FullRepeat } => Box::new(move |i, j| {
            // segment s holds block s/2; even s clean, odd s noisy
            let (si, sj) = (i / bsz, j / bsz);
            let (bi, ci) = (si / 2, si % 2 == 0);
            let (bj, cj) = (sj / 2, sj % 2 == 0);
            if ci {
                cj && bj <= bi
            } else {
                si == sj || (cj && bj < bi)
            }
        }),
        MaskKind::SftRepeat { mode: RepeatMode::OutputRepeat } => Box::new(move |i, j| {
            let (si, sj) = (i / bsz, j / bsz);
            let clean = |s: usize| s < total_blocks;
            let block = |s: usize| if s < total_blocks { s } else { prompt_blocks + (s - total_blocks) };
            if clean(si) {
                clean(sj) && block(sj) <= block(si)
            } else {
                si == sj || (clean(sj) && block(sj) < block(si))
            }
        }),
        MaskKind::TraceReplay { steps_per_block } => {
            // noisy segments follow the clean run, ordered by block then step
            let mut seg_block = Vec::new();
            for (k, &n) in steps_per_block.iter().enumerate() {
                for _ in 0..n {
                    seg_block.push(prompt_blocks + k);
                }
            }
            Box::new(move |i, j| {
                let (si, sj) = (i / bsz, j / bsz);
                let clean = |s: usize| s < total_blocks;
                let block = |s: usize| {
                    if s < total_blocks { s } else { seg_block[s - total_blocks] }
                };
                if clean(si) {
                    clean(sj) && block(sj) <= block(si)
                } else {
                    si == sj || (clean(sj) && block(sj) < block(si))
                }
            })
        }
    }
}
