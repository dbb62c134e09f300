//! Synthetic target model, teacher-forced data, and the lossless block
//! draft/verify loop.
//!
//! Verification is a hard match: a draft token is accepted iff it equals the
//! token the target policy selects at that position given the true prefix.
//! Each round emits the accepted draft tokens plus one target token (the
//! correction on a mismatch, the bonus after a fully accepted block).

use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LogitBlock, TargetDistBlock, TargetTokens};
use crate::numerics::{argmax, log_softmax_unchecked, Distribution};
use crate::rng::{self, Rng};
use crate::weights::{surrogate_s, ConfidenceBlock};

/// Default ceiling on the number of contexts a target table may hold.
pub const DEFAULT_TABLE_LIMIT: usize = 1_000_000;

/// Token used to left-pad short contexts.
pub const PAD_TOKEN: usize = 0;

/// Order-`k` next-token table over a vocabulary of `V` tokens.
#[derive(Debug, Clone)]
pub struct TargetModel {
    vocab: usize,
    order: usize,
    concentration: f64,
    seed: u64,
    table: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub vocab: usize,
    pub order: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl TargetModel {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_contexts(&self) -> usize {
        self.table.len() / self.vocab
    }

    /// Row for table index `index` (base-`V` digits of the context, oldest first).
    pub fn row_at(&self, index: usize) -> &[f64] {
        &self.table[index * self.vocab..(index + 1) * self.vocab]
    }

    /// Next-token distribution after `history`; only the last `k` tokens
    /// matter and shorter histories are left-padded with [`PAD_TOKEN`].
    pub fn row(&self, history: &[usize]) -> &[f64] {
        self.row_at(self.context_index(history))
    }

    pub fn distribution(&self, history: &[usize]) -> Distribution {
        Distribution::new(self.row(history).to_vec()).expect("target rows are normalized")
    }

    fn context_index(&self, history: &[usize]) -> usize {
        let take = history.len().min(self.order);
        let pad = self.order - take;
        let tail = &history[history.len() - take..];
        std::iter::repeat_n(PAD_TOKEN, pad)
            .chain(tail.iter().copied())
            .fold(0, |acc, t| acc * self.vocab + t)
    }

    /// Mean over contexts of the largest row probability.
    pub fn mean_top1(&self) -> f64 {
        let n = self.num_contexts();
        (0..n)
            .map(|i| self.row_at(i).iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / n as f64
    }
}

/// Draws every row as `softmax(g / concentration)` with standard-normal `g`.
/// Small concentrations give near one-hot rows, large ones near-uniform rows.
pub fn sample_target_model(vocab: usize, order: usize, concentration: f64, seed: u64) -> Result<TargetModel> {
    sample_target_model_with_limit(vocab, order, concentration, seed, DEFAULT_TABLE_LIMIT)
}

pub fn sample_target_model_with_limit(
    vocab: usize,
    order: usize,
    concentration: f64,
    seed: u64,
    limit: usize,
) -> Result<TargetModel> {
    if vocab < 2 {
        return Err(Error::invalid("target vocabulary must be >= 2"));
    }
    if order == 0 {
        return Err(Error::invalid("target order must be >= 1"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::invalid(format!(
            "concentration = {concentration} must be positive"
        )));
    }
    let contexts = u32::try_from(order)
        .ok()
        .and_then(|k| vocab.checked_pow(k))
        .filter(|n| *n <= limit)
        .ok_or_else(|| {
            Error::Capacity(format!(
                "{vocab}^{order} contexts exceed the table limit of {limit}"
            ))
        })?;
    let mut rng = rng::stream(seed, rng::streams::TARGET_TABLE);
    let mut table = Vec::with_capacity(contexts * vocab);
    let mut scores = vec![0.0; vocab];
    for _ in 0..contexts {
        for s in scores.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *s = g / concentration;
        }
        table.extend(log_softmax_unchecked(&scores).into_iter().map(f64::exp));
    }
    Ok(TargetModel {
        vocab,
        order,
        concentration,
        seed,
        table,
    })
}

pub fn sample_target_model_from_spec(spec: &TargetSpec) -> Result<TargetModel> {
    sample_target_model(spec.vocab, spec.order, spec.concentration, spec.seed)
}

/// Token chosen by the target policy after `history`.
///
/// `T = 0` is greedy with lowest-index tie-break and draws nothing from `rng`;
/// `T > 0` samples from the row raised to `1/T` and renormalized, drawing
/// exactly one uniform.
pub fn target_policy_token(model: &TargetModel, history: &[usize], temperature: f64, rng: &mut Rng) -> usize {
    let row = model.row(history);
    if temperature <= 0.0 {
        return argmax(row);
    }
    let u: f64 = rng.random();
    if temperature == 1.0 {
        return sample_index(row.iter().copied(), 1.0, u);
    }
    let logits: Vec<f64> = row
        .iter()
        .map(|p| if *p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = weights.iter().sum();
    sample_index(weights.into_iter(), total, u)
}

fn sample_index(weights: impl Iterator<Item = f64>, total: f64, u: f64) -> usize {
    let threshold = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if threshold < acc {
            return i;
        }
    }
    last_positive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: Vec<usize>,
    pub targets: TargetTokens,
    pub target_dists: Option<TargetDistBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSpec {
    pub num_sequences: usize,
    /// Total sequence length, including the `context` prompt tokens.
    pub length: usize,
    pub block: usize,
    pub context: usize,
    pub temperature: f64,
    pub seed: u64,
    pub with_target_dists: bool,
}

/// Generates target-policy sequences from uniformly random `C`-token prompts
/// and slices them at stride `B` into teacher-forced examples.
pub fn generate_training_data(model: &TargetModel, spec: &DataSpec) -> Result<Vec<TrainingExample>> {
    let DataSpec {
        num_sequences,
        length,
        block,
        context,
        temperature,
        seed,
        with_target_dists,
    } = *spec;
    if block == 0 || context == 0 {
        return Err(Error::invalid("block and context must be positive"));
    }
    if length < context + block {
        return Err(Error::invalid(format!(
            "sequence length {length} shorter than context + block = {}",
            context + block
        )));
    }
    let mut rng = rng::stream(seed, rng::streams::TRAIN_DATA);
    let per_sequence = (length - context) / block;
    let mut examples = Vec::with_capacity(num_sequences * per_sequence);
    for _ in 0..num_sequences {
        let mut seq: Vec<usize> = (0..context).map(|_| rng.random_range(0..model.vocab)).collect();
        while seq.len() < length {
            let t = target_policy_token(model, &seq, temperature, &mut rng);
            seq.push(t);
        }
        for i in 0..per_sequence {
            let start = context + i * block;
            let targets = seq[start..start + block].to_vec();
            let target_dists = with_target_dists.then(|| {
                TargetDistBlock::new(
                    (0..block)
                        .map(|j| model.distribution(&seq[..start + j]))
                        .collect(),
                )
            });
            examples.push(TrainingExample {
                context: seq[start - context..start].to_vec(),
                targets: TargetTokens::new(targets),
                target_dists,
            });
        }
    }
    Ok(examples)
}

/// Anything that proposes a full block of logit rows from a fixed-width context.
pub trait BlockDrafter {
    fn block_size(&self) -> usize;
    fn context_len(&self) -> usize;
    fn draft_logits(&self, context: &[usize]) -> Result<LogitBlock>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub block: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(Error::invalid("decode block size must be >= 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature = {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One draft/verify round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOutcome {
    pub q: ConfidenceBlock,
    pub accepted: usize,
    pub emitted: usize,
    pub surrogate: f64,
    /// The round hit `max_new_tokens` and only a prefix of its tokens was kept.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockOutcome>,
}

impl DecodeOutput {
    /// Mean emitted length over rounds that were not truncated.
    pub fn mean_emitted(&self) -> Option<f64> {
        mean(self.blocks.iter().filter(|b| !b.truncated).map(|b| b.emitted as f64))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Last `width` tokens of `history`, left-padded with [`PAD_TOKEN`].
pub fn padded_context(history: &[usize], width: usize) -> Vec<usize> {
    let take = history.len().min(width);
    let mut ctx = vec![PAD_TOKEN; width - take];
    ctx.extend_from_slice(&history[history.len() - take..]);
    ctx
}

fn check_prompt(target: &TargetModel, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must contain at least one token"));
    }
    if let Some(t) = prompt.iter().find(|t| **t >= target.vocab) {
        return Err(Error::invalid(format!(
            "prompt token {t} out of range for vocabulary {}",
            target.vocab
        )));
    }
    Ok(())
}

/// Block speculative decoding with hard-match verification.
///
/// Tokens that end up in the output are drawn from the `DECODE` stream in
/// output order, one per token, so at any temperature the result equals
/// [`decode_autoregressive`] with the same seed. Target tokens past the first
/// mismatch are needed only for the confidences and come from a separate stream.
pub fn decode_speculative<D: BlockDrafter + ?Sized>(
    target: &TargetModel,
    drafter: &D,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    check_prompt(target, prompt)?;
    if drafter.block_size() != cfg.block {
        return Err(Error::invalid(format!(
            "drafter block size {} differs from decode block size {}",
            drafter.block_size(),
            cfg.block
        )));
    }
    let mut rng = rng::stream(cfg.seed, rng::streams::DECODE);
    let mut shadow = rng::stream(cfg.seed, rng::streams::DECODE_SHADOW);
    let mut tokens = prompt.to_vec();
    let mut blocks = Vec::new();
    let end = prompt.len() + cfg.max_new_tokens;

    while tokens.len() < end {
        let logits = drafter.draft_logits(&padded_context(&tokens, drafter.context_len()))?;
        if logits.rows() != cfg.block || logits.cols() != target.vocab {
            return Err(Error::invalid(format!(
                "drafter produced a {}x{} block, expected {}x{}",
                logits.rows(),
                logits.cols(),
                cfg.block,
                target.vocab
            )));
        }
        let mut path = tokens.clone();
        let mut q = Vec::with_capacity(cfg.block);
        let mut accepted = 0;
        let mut live = true;
        for row in logits.iter_rows() {
            let source = if live { &mut rng } else { &mut shadow };
            let z = target_policy_token(target, &path, cfg.temperature, source);
            q.push(log_softmax_unchecked(row)[z].exp());
            if live {
                if argmax(row) == z {
                    accepted += 1;
                } else {
                    live = false;
                }
            }
            path.push(z);
        }
        let emitted = accepted + 1;
        let mut new_tokens = path[tokens.len()..tokens.len() + accepted.min(cfg.block)].to_vec();
        if accepted == cfg.block {
            new_tokens.push(target_policy_token(target, &path, cfg.temperature, &mut rng));
        } else {
            new_tokens.push(path[tokens.len() + accepted]);
        }
        let room = end - tokens.len();
        let truncated = new_tokens.len() > room;
        new_tokens.truncate(room);
        tokens.extend(new_tokens);

        let q = ConfidenceBlock::new(q)?;
        let surrogate = surrogate_s(&q);
        blocks.push(BlockOutcome {
            q,
            accepted,
            emitted,
            surrogate,
            truncated,
        });
    }
    Ok(DecodeOutput { tokens, blocks })
}

/// Reference decoder: one target-policy token at a time.
pub fn decode_autoregressive(target: &TargetModel, prompt: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    check_prompt(target, prompt)?;
    let mut rng = rng::stream(cfg.seed, rng::streams::DECODE);
    let mut tokens = prompt.to_vec();
    for _ in 0..cfg.max_new_tokens {
        let t = target_policy_token(target, &tokens, cfg.temperature, &mut rng);
        tokens.push(t);
    }
    Ok(tokens)
}

/// Monte-Carlo accepted length when position `i` is accepted independently
/// with probability `q_i` until the first rejection. Returns `(mean, standard error)`.
pub fn bernoulli_accept_sim(q: &ConfidenceBlock, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let mut rng = rng::stream(seed, rng::streams::BERNOULLI);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let x = simulate_accepted(q, &mut rng) as f64;
        sum += x;
        sum_sq += x * x;
    }
    let n = trials as f64;
    let mean = sum / n;
    let se = if trials > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// One accepted-length draw under independent Bernoulli acceptance.
pub fn simulate_accepted(q: &ConfidenceBlock, rng: &mut Rng) -> usize {
    q.values().iter().take_while(|qi| rng.random::<f64>() < **qi).count()
}

/// Largest block for which [`exact_expected_accepted`] enumerates patterns.
pub const MAX_ENUMERATION_BLOCK: usize = 20;

/// `E[X]` by summing over all `2^B` accept/reject patterns.
pub fn exact_expected_accepted(q: &ConfidenceBlock) -> Result<f64> {
    let b = q.block_size();
    if b > MAX_ENUMERATION_BLOCK {
        return Err(Error::Capacity(format!(
            "enumeration over 2^{b} patterns exceeds 2^{MAX_ENUMERATION_BLOCK}"
        )));
    }
    let q = q.values();
    let mut expected = 0.0;
    for pattern in 0u32..(1 << b) {
        let mut prob = 1.0;
        for (i, qi) in q.iter().enumerate() {
            prob *= if pattern >> i & 1 == 1 { *qi } else { 1.0 - qi };
        }
        let leading = (!pattern).trailing_zeros().min(b as u32);
        expected += prob * leading as f64;
    }
    Ok(expected)
}
