//! Toy parallel block drafter.
//!
//! The last `C` tokens are embedded and concatenated, passed through two
//! `tanh` layers, and read out by `B` independent linear heads, one per block
//! position. All rows come from the same trunk activation, so no draft
//! position sees another position's output.
//!
//! Parameters live in one flat vector; [`Layout`] names the segments:
//! `embedding [V x E]`, `w1 [H x C*E]`, `b1 [H]`, `w2 [H x H]`, `b2 [H]`,
//! `head_w [B x V x H]`, `head_b [B x V]`, all row-major.

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{compute_loss, LogitBlock, LossConfig};
use crate::numerics::{adamw_step, clip_grad_norm, Matrix, OptimizerState};
use crate::rng;
use crate::specdec::{BlockDrafter, TrainingExample};

const EMBED_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrafterConfig {
    pub vocab: usize,
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
    pub block: usize,
}

impl DrafterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("context", self.context),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("block", self.block),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("drafter {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each parameter group in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub embedding: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(c: &DrafterConfig) -> Self {
        let input = c.context * c.embed;
        let embedding = 0;
        let w1 = embedding + c.vocab * c.embed;
        let b1 = w1 + c.hidden * input;
        let w2 = b1 + c.hidden;
        let b2 = w2 + c.hidden * c.hidden;
        let head_w = b2 + c.hidden;
        let head_b = head_w + c.block * c.vocab * c.hidden;
        let total = head_b + c.block * c.vocab;
        Self {
            embedding,
            w1,
            b1,
            w2,
            b2,
            head_w,
            head_b,
            total,
        }
    }

    /// `(name, start, end)` for every group, in storage order.
    pub fn groups(&self) -> [(&'static str, usize, usize); 7] {
        [
            ("embedding", self.embedding, self.w1),
            ("w1", self.w1, self.b1),
            ("b1", self.b1, self.w2),
            ("w2", self.w2, self.b2),
            ("b2", self.b2, self.head_w),
            ("head_w", self.head_w, self.head_b),
            ("head_b", self.head_b, self.total),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrafterParams {
    config: DrafterConfig,
    layout: Layout,
    data: Vec<f64>,
}

/// Activations kept from [`DrafterParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    context: Vec<usize>,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Batch mean of the draft confidence at each block position.
    pub mean_q: Vec<f64>,
    /// Batch mean of the loss coefficient at each block position.
    pub mean_weight: Vec<f64>,
}

/// `out += M v` for row-major `M` of shape `rows x v.len()`.
fn mat_vec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(v.len())) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += M^T u` for row-major `M` of shape `u.len() x out.len()`.
fn mat_t_vec_add(m: &[f64], u: &[f64], out: &mut [f64]) {
    for (row, ui) in m.chunks_exact(out.len()).zip(u) {
        if *ui == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * ui;
        }
    }
}

/// `G += u v^T`.
fn outer_add(g: &mut [f64], u: &[f64], v: &[f64]) {
    for (row, ui) in g.chunks_exact_mut(v.len()).zip(u) {
        if *ui == 0.0 {
            continue;
        }
        for (o, b) in row.iter_mut().zip(v) {
            *o += ui * b;
        }
    }
}

impl DrafterParams {
    /// Deterministic initialization: normal weights scaled by `1/sqrt(fan_in)`,
    /// embeddings scaled by 0.02, zero biases.
    pub fn init(config: &DrafterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut data = vec![0.0; layout.total];
        let mut rng = rng::stream(seed, rng::streams::DRAFTER_INIT);
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for v in &mut data[range] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * scale;
            }
        };
        let input = (config.context * config.embed) as f64;
        let hidden = config.hidden as f64;
        fill(layout.embedding..layout.w1, EMBED_SCALE);
        fill(layout.w1..layout.b1, 1.0 / input.sqrt());
        fill(layout.w2..layout.b2, 1.0 / hidden.sqrt());
        fill(layout.head_w..layout.head_b, 1.0 / hidden.sqrt());
        Ok(Self {
            config: *config,
            layout,
            data,
        })
    }

    pub fn from_flat(config: &DrafterConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if data.len() != layout.total {
            return Err(Error::invalid(format!(
                "{} parameters given, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        crate::numerics::check_finite(&data)?;
        Ok(Self {
            config: *config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &DrafterConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Weight matrix of head `j`, shape `V x H`.
    pub fn head_weights_mut(&mut self, j: usize) -> &mut [f64] {
        let size = self.config.vocab * self.config.hidden;
        let start = self.layout.head_w + j * size;
        &mut self.data[start..start + size]
    }

    /// Bias of head `j`, length `V`.
    pub fn head_bias_mut(&mut self, j: usize) -> &mut [f64] {
        let start = self.layout.head_b + j * self.config.vocab;
        &mut self.data[start..start + self.config.vocab]
    }

    fn seg(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start..end]
    }

    pub fn forward(&self, context: &[usize]) -> Result<(LogitBlock, ForwardCache)> {
        let c = &self.config;
        let l = &self.layout;
        if context.len() != c.context {
            return Err(Error::invalid(format!(
                "context of {} tokens, drafter expects {}",
                context.len(),
                c.context
            )));
        }
        if let Some(t) = context.iter().find(|t| **t >= c.vocab) {
            return Err(Error::invalid(format!(
                "context token {t} out of range for vocabulary {}",
                c.vocab
            )));
        }
        let emb = self.seg(l.embedding, l.w1);
        let input: Vec<f64> = context
            .iter()
            .flat_map(|&t| emb[t * c.embed..(t + 1) * c.embed].iter().copied())
            .collect();

        let mut h1 = self.seg(l.b1, l.w2).to_vec();
        mat_vec_add(self.seg(l.w1, l.b1), &input, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());

        let mut h2 = self.seg(l.b2, l.head_w).to_vec();
        mat_vec_add(self.seg(l.w2, l.b2), &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());

        let mut logits = Matrix::from_vec(c.block, c.vocab, self.seg(l.head_b, l.total).to_vec())?;
        let head_size = c.vocab * c.hidden;
        let head_w = self.seg(l.head_w, l.head_b);
        for j in 0..c.block {
            mat_vec_add(&head_w[j * head_size..(j + 1) * head_size], &h2, logits.row_mut(j));
        }
        let cache = ForwardCache {
            context: context.to_vec(),
            input,
            h1,
            h2,
        };
        Ok((logits, cache))
    }

    /// Gradient of `sum_{j,v} grad_logits[j,v] * logits[j,v]` with respect to
    /// every parameter, in the flat layout.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.layout.total];
        self.backward_into(cache, grad_logits, &mut out)?;
        Ok(out)
    }

    /// [`Self::backward`], accumulating into `out`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_logits: &Matrix, out: &mut [f64]) -> Result<()> {
        let c = &self.config;
        let l = &self.layout;
        if grad_logits.rows() != c.block || grad_logits.cols() != c.vocab {
            return Err(Error::invalid(format!(
                "logit gradient is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                c.block,
                c.vocab
            )));
        }
        if out.len() != l.total {
            return Err(Error::invalid("gradient buffer does not match layout"));
        }
        if cache.context.len() != c.context || cache.h2.len() != c.hidden {
            return Err(Error::invalid("forward cache does not match drafter"));
        }

        let head_size = c.vocab * c.hidden;
        let head_w = self.seg(l.head_w, l.head_b);
        let mut dh2 = vec![0.0; c.hidden];
        for j in 0..c.block {
            let g = grad_logits.row(j);
            let w_start = l.head_w + j * head_size;
            outer_add(&mut out[w_start..w_start + head_size], g, &cache.h2);
            let b_start = l.head_b + j * c.vocab;
            for (o, gv) in out[b_start..b_start + c.vocab].iter_mut().zip(g) {
                *o += gv;
            }
            mat_t_vec_add(&head_w[j * head_size..(j + 1) * head_size], g, &mut dh2);
        }

        let da2: Vec<f64> = dh2.iter().zip(&cache.h2).map(|(d, h)| d * (1.0 - h * h)).collect();
        outer_add(&mut out[l.w2..l.b2], &da2, &cache.h1);
        for (o, d) in out[l.b2..l.head_w].iter_mut().zip(&da2) {
            *o += d;
        }
        let mut dh1 = vec![0.0; c.hidden];
        mat_t_vec_add(self.seg(l.w2, l.b2), &da2, &mut dh1);

        let da1: Vec<f64> = dh1.iter().zip(&cache.h1).map(|(d, h)| d * (1.0 - h * h)).collect();
        outer_add(&mut out[l.w1..l.b1], &da1, &cache.input);
        for (o, d) in out[l.b1..l.w2].iter_mut().zip(&da1) {
            *o += d;
        }
        let mut dinput = vec![0.0; c.context * c.embed];
        mat_t_vec_add(self.seg(l.w1, l.b1), &da1, &mut dinput);

        for (i, &t) in cache.context.iter().enumerate() {
            let start = l.embedding + t * c.embed;
            for (o, d) in out[start..start + c.embed]
                .iter_mut()
                .zip(&dinput[i * c.embed..(i + 1) * c.embed])
            {
                *o += d;
            }
        }
        Ok(())
    }

    /// Mean loss over `batch` for the given parameters; no update.
    pub fn batch_loss<E: Borrow<TrainingExample>>(&self, batch: &[E], loss: &LossConfig) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let ex = ex.borrow();
            let (logits, _) = self.forward(&ex.context)?;
            total += compute_loss(loss, &logits, &ex.targets, ex.target_dists.as_ref())?.loss;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean loss and mean parameter gradient over `batch`, plus per-position
    /// confidence and coefficient means.
    pub fn batch_gradient<E: Borrow<TrainingExample>>(&self, batch: &[E], loss: &LossConfig) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let b = self.config.block;
        let mut grad = vec![0.0; self.layout.total];
        let mut total = 0.0;
        let mut mean_q = vec![0.0; b];
        let mut mean_weight = vec![0.0; b];
        for ex in batch {
            let ex = ex.borrow();
            let (logits, cache) = self.forward(&ex.context)?;
            let result = compute_loss(loss, &logits, &ex.targets, ex.target_dists.as_ref())?;
            self.backward_into(&cache, &result.grad, &mut grad)?;
            total += result.loss;
            for (j, (row, &t)) in logits.iter_rows().zip(ex.targets.tokens()).enumerate() {
                mean_q[j] += crate::numerics::log_softmax_unchecked(row)[t].exp();
                mean_weight[j] += result.weights.values()[j];
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        mean_q.iter_mut().for_each(|v| *v /= n);
        mean_weight.iter_mut().for_each(|v| *v /= n);
        Ok(BatchGradient {
            loss: total / n,
            grad,
            mean_q,
            mean_weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_q: Vec<f64>,
    pub mean_weight: Vec<f64>,
}

/// Optimizer-side settings for [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub step: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

/// Averages the loss gradient over `batch`, clips it, and applies one AdamW update.
pub fn train_step<E: Borrow<TrainingExample>>(
    params: &mut DrafterParams,
    state: &mut OptimizerState,
    batch: &[E],
    loss: &LossConfig,
    settings: StepSettings,
) -> Result<StepMetrics> {
    let BatchGradient {
        loss: value,
        mut grad,
        mean_q,
        mean_weight,
    } = params.batch_gradient(batch, loss)?;
    let grad_norm = match settings.clip {
        Some(max) => clip_grad_norm(&mut grad, max),
        None => crate::numerics::l2_norm(&grad),
    };
    state.config.lr = settings.lr;
    adamw_step(&mut params.data, &grad, state)?;
    Ok(StepMetrics {
        step: settings.step,
        loss: value,
        grad_norm,
        lr: settings.lr,
        mean_q,
        mean_weight,
    })
}

impl BlockDrafter for DrafterParams {
    fn block_size(&self) -> usize {
        self.config.block
    }

    fn context_len(&self) -> usize {
        self.config.context
    }

    fn draft_logits(&self, context: &[usize]) -> Result<LogitBlock> {
        self.forward(context).map(|(logits, _)| logits)
    }
}

pub const CHECKPOINT_FORMAT: &str = "dpace-drafter";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointGroup {
    name: String,
    offset: usize,
    len: usize,
}

/// JSON checkpoint: header, group table, flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DrafterConfig,
    groups: Vec<CheckpointGroup>,
    params: Vec<f64>,
}

impl DrafterParams {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            groups: self
                .layout
                .groups()
                .iter()
                .map(|(name, start, end)| CheckpointGroup {
                    name: name.to_string(),
                    offset: *start,
                    len: end - start,
                })
                .collect(),
            params: self.data.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a drafter checkpoint: `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let params = Self::from_flat(&ckpt.config, ckpt.params)?;
        let expected: Vec<_> = params
            .layout
            .groups()
            .iter()
            .map(|(n, s, e)| (n.to_string(), *s, e - s))
            .collect();
        let found: Vec<_> = ckpt.groups.into_iter().map(|g| (g.name, g.offset, g.len)).collect();
        if expected != found {
            return Err(Error::invalid("checkpoint group table does not match its config"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::TargetTokens;
    use crate::numerics::AdamWConfig;

    fn small() -> DrafterConfig {
        DrafterConfig {
            vocab: 5,
            context: 3,
            embed: 2,
            hidden: 4,
            block: 3,
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = DrafterParams::init(&small(), 7).unwrap();
        let b = DrafterParams::init(&small(), 7).unwrap();
        let c = DrafterParams::init(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), a.layout().total);
    }

    #[test]
    fn fresh_logits_are_small() {
        let cfg = DrafterConfig {
            vocab: 64,
            context: 4,
            embed: 16,
            hidden: 128,
            block: 8,
        };
        let p = DrafterParams::init(&cfg, 3).unwrap();
        for ctx in [[0, 0, 0, 0], [63, 1, 17, 5], [9, 9, 9, 9]] {
            let (l, _) = p.forward(&ctx).unwrap();
            assert!(l.as_slice().iter().all(|v| v.is_finite() && v.abs() < 100.0));
        }
    }

    #[test]
    fn forward_rejects_bad_context() {
        let p = DrafterParams::init(&small(), 1).unwrap();
        assert!(p.forward(&[0, 1]).is_err());
        assert!(p.forward(&[0, 1, 5]).is_err());
    }

    #[test]
    fn zeroed_head_gives_zero_row() {
        let mut p = DrafterParams::init(&small(), 1).unwrap();
        p.head_weights_mut(1).fill(0.0);
        p.head_bias_mut(1).fill(0.0);
        let (l, _) = p.forward(&[1, 2, 3]).unwrap();
        assert!(l.row(1).iter().all(|v| *v == 0.0));
        assert!(l.row(0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn head_permutation_permutes_rows() {
        let p = DrafterParams::init(&small(), 4).unwrap();
        let mut swapped = p.clone();
        let h0 = p.clone().head_weights_mut(0).to_vec();
        let h2 = p.clone().head_weights_mut(2).to_vec();
        swapped.head_weights_mut(0).copy_from_slice(&h2);
        swapped.head_weights_mut(2).copy_from_slice(&h0);
        let ctx = [4, 0, 2];
        let (a, _) = p.forward(&ctx).unwrap();
        let (b, _) = swapped.forward(&ctx).unwrap();
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn zero_logit_gradient_gives_zero_param_gradient() {
        let p = DrafterParams::init(&small(), 2).unwrap();
        let (_, cache) = p.forward(&[0, 1, 2]).unwrap();
        let g = p.backward(&cache, &Matrix::zeros(3, 5)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(p.backward(&cache, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DrafterParams::init(&small(), 11).unwrap();
        let json = p.to_checkpoint_json().unwrap();
        let q = DrafterParams::from_checkpoint_json(&json).unwrap();
        assert_eq!(p, q);
        let bad = json.replacen("\"version\":1", "\"version\":9", 1);
        assert!(DrafterParams::from_checkpoint_json(&bad).is_err());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = DrafterParams::init(&small(), 5).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new(p.len(), AdamWConfig::default());
        let batch = vec![TrainingExample {
            context: vec![0, 1, 2],
            targets: TargetTokens::new(vec![3, 4, 0]),
            target_dists: None,
        }];
        let m = train_step(
            &mut p,
            &mut state,
            &batch,
            &LossConfig::new(crate::losses::LossKind::Dpace),
            StepSettings {
                step: 0,
                lr: 0.0,
                clip: Some(1.0),
            },
        )
        .unwrap();
        assert_eq!(p, before);
        assert!(m.loss.is_finite());
        assert_eq!(m.mean_q.len(), 3);
        assert_eq!(m.mean_weight.len(), 3);
    }
}
