//! Masked prediction with quantized targets: span masking of the latents, a
//! Gumbel-softmax product quantizer, a temperature-scaled cosine contrastive
//! loss over masked steps and an entropy-based codebook diversity penalty.

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::cpc::{check_same_layout, Encoder, EncoderConfig};
use crate::data::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{AttentionStack, Binder, Linear, Param, ParamSet};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{Tape, Tensor};
use crate::train::{optimize, BatchStream, StepRecord, TrainOptions};

/// Probability floor inside the entropy's logarithm; keeps `0 · log 0` at 0.
const ENTROPY_EPS: f32 = 1e-12;

/// Re-draws attempted before forcing a single span.
const MASK_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub start_probability: f64,
    pub span: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { start_probability: 0.065, span: 10 }
    }
}

impl MaskSpec {
    /// Long-sequence masked fraction `1 − (1 − p)^M`.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_probability).powi(self.span as i32)
    }
}

/// Sorted masked positions: every position starts a span with probability
/// `p`; a span covers the next `M` steps, clipped at the end. An empty draw
/// is repeated; if it stays empty one uniformly placed span is used.
pub fn sample_mask(len: usize, spec: &MaskSpec, rng: &mut Rng) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut masked = vec![false; len];
    for _ in 0..MASK_REDRAWS {
        for i in 0..len {
            if rng.random_bool(spec.start_probability.clamp(0.0, 1.0)) {
                masked[i..(i + spec.span).min(len)].iter_mut().for_each(|m| *m = true);
            }
        }
        if masked.iter().any(|&m| m) {
            break;
        }
    }
    if !masked.iter().any(|&m| m) {
        let start = rng.random_range(0..len);
        masked[start..(start + spec.span.max(1)).min(len)].iter_mut().for_each(|m| *m = true);
    }
    (0..len).filter(|&i| masked[i]).collect()
}

/// Replaces the masked rows of `z` with `embedding` (`[D]`).
pub fn apply_mask(z: &Tensor, embedding: &Tensor, masked: &[usize]) -> Result<Tensor> {
    let (u, d) = z.dims2()?;
    let mut flags = vec![0.0f32; u];
    for &i in masked {
        if i >= u {
            return Err(Error::dim(format!("mask index {i} out of range for {u} steps")));
        }
        flags[i] = 1.0;
    }
    let tape = z.tape();
    let keep = tape.constant(flags.iter().map(|f| 1.0 - f).collect(), &[u, 1])?;
    let put = tape.constant(flags, &[u, 1])?;
    z.mul(&keep)?.add(&put.mul(&embedding.reshape(&[1, d])?)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub groups: usize,
    pub entries: usize,
    /// Width of each group's codewords.
    pub codeword_dim: usize,
}

pub enum QuantizeMode<'a> {
    /// Gumbel-softmax with temperature `tau`; hard forward, soft backward.
    Train { tau: f32, rng: &'a mut Rng },
    /// Argmax codewords.
    Eval,
}

pub struct QuantizedTargets {
    /// `[U × D]` targets.
    pub values: Tensor,
    /// Noise-free softmax of the logits, `[U × G·V]`.
    pub probs: Tensor,
    /// Relaxed (Gumbel-softmax) assignments in train mode, `[U × G·V]`.
    pub soft: Option<Tensor>,
    /// Chosen entry per step and group, row-major `[U × G]`.
    pub hard: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    logits: Linear,
    project: Linear,
    codebook: String,
}

impl Quantizer {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, config: QuantizerConfig, rng: &mut Rng) -> Result<Self> {
        let QuantizerConfig { groups, entries, codeword_dim } = config;
        if groups == 0 || entries == 0 || codeword_dim == 0 {
            return Err(Error::Config("quantizer groups, entries and codeword width must be positive".into()));
        }
        let logits = Linear::new(params, &format!("{name}.logits"), dim, groups * entries, true, rng);
        // Unit-variance logit weights so code choice is driven by the input
        // rather than by the Gumbel noise from the first step.
        let w: Vec<f32> = (0..dim * groups * entries).map(|_| StandardNormal.sample(rng)).collect();
        params.insert(format!("{name}.logits.weight"), Param::new(vec![dim, groups * entries], w)?);
        let codebook = format!("{name}.codebook");
        let n = groups * entries * codeword_dim;
        let init: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        params.insert(codebook.clone(), Param::new(vec![groups * entries, codeword_dim], init)?);
        let project = Linear::new(params, &format!("{name}.project"), groups * codeword_dim, dim, true, rng);
        Ok(Self { config, logits, project, codebook })
    }

    pub fn quantize(&self, b: &Binder, z: &Tensor, mode: QuantizeMode) -> Result<QuantizedTargets> {
        let QuantizerConfig { groups, entries, codeword_dim } = self.config;
        let (u, _) = z.dims2()?;
        let tape = b.tape();
        let logits = self.logits.forward(b, z)?;
        let codebook = b.get(&self.codebook)?;
        let lv = logits.to_vec();

        let mut probs = Vec::with_capacity(groups);
        let mut softs = Vec::with_capacity(groups);
        let mut codewords = Vec::with_capacity(groups);
        let mut hard = vec![0usize; u * groups];
        let (tau, mut rng) = match mode {
            QuantizeMode::Train { tau, rng } => (Some(tau), Some(rng)),
            QuantizeMode::Eval => (None, None),
        };
        for g in 0..groups {
            let lg = logits.narrow(1, g * entries, entries)?;
            probs.push(lg.softmax(1)?);
            let mut onehot = vec![0.0f32; u * entries];
            let assign = match (tau, rng.as_deref_mut()) {
                (Some(tau), Some(rng)) => {
                    let noise: Vec<f32> = (0..u * entries).map(|_| gumbel(rng)).collect();
                    let perturbed: Vec<f32> =
                        (0..u * entries).map(|i| lv[i / entries * groups * entries + g * entries + i % entries] + noise[i]).collect();
                    for t in 0..u {
                        hard[t * groups + g] = argmax(&perturbed[t * entries..(t + 1) * entries]);
                    }
                    let noise = tape.constant(noise, &[u, entries])?;
                    let soft = lg.add(&noise)?.scale(1.0 / tau).softmax(1)?;
                    for t in 0..u {
                        onehot[t * entries + hard[t * groups + g]] = 1.0;
                    }
                    let st = soft.straight_through(onehot)?;
                    softs.push(soft);
                    st
                }
                _ => {
                    for t in 0..u {
                        let row = &lv[t * groups * entries + g * entries..t * groups * entries + (g + 1) * entries];
                        hard[t * groups + g] = argmax(row);
                        onehot[t * entries + hard[t * groups + g]] = 1.0;
                    }
                    tape.constant(onehot, &[u, entries])?
                }
            };
            let book = codebook.narrow(0, g * entries, entries)?;
            codewords.push(assign.matmul(&book)?);
        }
        let cat = |xs: &[Tensor]| -> Result<Tensor> {
            let refs: Vec<&Tensor> = xs.iter().collect();
            tape.concat(&refs, 1)
        };
        let joined = cat(&codewords)?;
        debug_assert_eq!(joined.shape(), vec![u, groups * codeword_dim]);
        Ok(QuantizedTargets {
            values: self.project.forward(b, &joined)?,
            probs: cat(&probs)?,
            soft: if softs.is_empty() { None } else { Some(cat(&softs)?) },
            hard,
        })
    }
}

fn gumbel(rng: &mut Rng) -> f32 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    (-(-u.ln()).ln()) as f32
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Distractors for masked step `target`: drawn from the other masked steps,
/// without replacement when at least `count` exist, with replacement
/// otherwise, none when `target` is the only masked step.
pub fn sample_masked_distractors(masked: &[usize], target: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let others: Vec<usize> = masked.iter().copied().filter(|&m| m != target).collect();
    if others.is_empty() {
        Vec::new()
    } else if others.len() >= count {
        sample_without_replacement(rng, others.len(), count).into_iter().map(|i| others[i]).collect()
    } else {
        (0..count).map(|_| others[rng.random_range(0..others.len())]).collect()
    }
}

pub struct MaskedLoss {
    /// Sum over masked steps of `−log softmax(cos / κ)` at the positive.
    pub loss: Tensor,
    /// Candidate indices per masked step, positive first.
    pub candidates: Vec<Vec<usize>>,
    /// True when a lone masked step left no distractors (loss is 0).
    pub degenerate: bool,
}

pub fn masked_contrastive_loss(
    q: &Tensor,
    c: &Tensor,
    masked: &[usize],
    distractors: usize,
    kappa: f32,
    rng: &mut Rng,
) -> Result<MaskedLoss> {
    if masked.is_empty() {
        return Err(Error::Contract("masked contrastive loss needs at least one masked step".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let candidates: Vec<Vec<usize>> = masked
        .iter()
        .map(|&u| {
            let mut set = vec![u];
            set.extend(sample_masked_distractors(masked, u, distractors, rng));
            set
        })
        .collect();
    let n = candidates[0].len();
    let degenerate = n == 1;
    if degenerate {
        log::warn!("single masked step: candidate set holds only the target");
    }
    let flat: Vec<usize> = candidates.iter().flatten().copied().collect();
    let ctx: Vec<usize> = masked.iter().flat_map(|&u| std::iter::repeat_n(u, n)).collect();
    let sims = q.index_select(&flat)?.cosine_rows(&c.index_select(&ctx)?)?;
    let logits = sims.reshape(&[masked.len(), n])?.scale(1.0 / kappa);
    let loss = logits.log_softmax(1)?.narrow(1, 0, 1)?.sum_all()?.neg();
    Ok(MaskedLoss { loss, candidates, degenerate })
}

/// `(1/G) Σ_g (1 − H(p̄_g) / ln V)` with `p̄_g` the row-average of each
/// group's probabilities in `probs: [rows × G·V]`. Zero when `V = 1`.
pub fn diversity_loss(probs: &Tensor, groups: usize, entries: usize) -> Result<Tensor> {
    let (_, width) = probs.dims2()?;
    if width != groups * entries {
        return Err(Error::dim(format!("{width} probability columns for {groups}×{entries} codebook")));
    }
    if entries == 1 {
        return Ok(probs.tape().scalar(0.0));
    }
    let mean = probs.mean(0)?.reshape(&[groups, entries])?;
    let entropy = mean.mul(&mean.add_scalar(ENTROPY_EPS).log())?.sum(1)?.neg();
    let ln_v = (entries as f32).ln();
    entropy.scale(-1.0 / ln_v).add_scalar(1.0).mean(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedConfig {
    pub encoder: EncoderConfig,
    pub context_blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mask: MaskSpec,
    pub quantizer: QuantizerConfig,
    pub distractors: usize,
    pub kappa: f32,
    pub diversity_weight: f32,
    /// Gumbel temperature `max(tau_end, tau_start · tau_decay^step)`.
    pub tau_start: f32,
    pub tau_end: f32,
    pub tau_decay: f32,
}

impl MaskedConfig {
    /// Desk encoder plus one stride-2 layer (50 Hz latents), two attention blocks.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk().with_extra_stride(2, 2),
            context_blocks: 2,
            heads: 4,
            ffn_dim: 256,
            mask: MaskSpec::default(),
            quantizer: QuantizerConfig { groups: 2, entries: 32, codeword_dim: 64 },
            distractors: 10,
            kappa: 0.1,
            diversity_weight: 0.1,
            tau_start: 2.0,
            tau_end: 0.5,
            tau_decay: 0.995,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.kappa > 0.0) {
            return Err(Error::Config("temperature κ must be positive".into()));
        }
        if self.distractors == 0 {
            return Err(Error::Config("distractor count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask.start_probability) || self.mask.span == 0 {
            return Err(Error::Config("mask probability must lie in [0, 1] and span be positive".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_decay > 0.0) {
            return Err(Error::Config("Gumbel temperature schedule must be positive".into()));
        }
        if !(self.diversity_weight >= 0.0) {
            return Err(Error::Config("diversity weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: usize) -> f32 {
        (self.tau_start * self.tau_decay.powi(step as i32)).max(self.tau_end)
    }

    pub fn feature_width(&self) -> usize {
        self.encoder.output_dim()
    }
}

/// One utterance's loss parts.
pub struct MaskedStep {
    pub contrastive: Tensor,
    pub masked: usize,
    pub probs: Tensor,
}

#[derive(Clone, Debug)]
pub struct MaskedModel {
    pub config: MaskedConfig,
    pub params: ParamSet,
    encoder: Encoder,
    context: AttentionStack,
    quantizer: Quantizer,
}

const MASK_EMBEDDING: &str = "mask.embedding";

impl MaskedModel {
    pub fn new(config: &MaskedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, "encoder", &config.encoder, &mut rng)?;
        let d = config.encoder.output_dim();
        let context = AttentionStack::new(
            &mut params,
            "context",
            d,
            config.heads,
            config.ffn_dim,
            config.context_blocks,
            true,
            &mut rng,
        )?;
        let quantizer = Quantizer::new(&mut params, "quantizer", d, config.quantizer, &mut rng)?;
        params.insert(MASK_EMBEDDING, Param::uniform(&[d], 1.0, &mut rng));
        Ok(Self { config: config.clone(), params, encoder, context, quantizer })
    }

    pub fn from_params(config: &MaskedConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        check_same_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn step_loss(&self, b: &Binder, waveform: &[f32], tau: f32, mask_rng: &mut Rng, rng: &mut Rng) -> Result<MaskedStep> {
        let x = b.tape().constant(waveform.to_vec(), &[waveform.len()])?;
        let z = self.encoder.forward(b, &x)?.0;
        let (u, _) = z.dims2()?;
        let masked = sample_mask(u, &self.config.mask, mask_rng);
        let c = self.context.forward(b, &apply_mask(&z, &b.get(MASK_EMBEDDING)?, &masked)?)?;
        let q = self.quantizer.quantize(b, &z, QuantizeMode::Train { tau, rng })?;
        let l = masked_contrastive_loss(&q.values, &c, &masked, self.config.distractors, self.config.kappa, rng)?;
        Ok(MaskedStep { contrastive: l.loss, masked: masked.len(), probs: q.probs })
    }

    /// Context outputs on the unmasked latents, without gradients.
    pub fn extract(&self, waveform: &[f32]) -> Result<FeatureMatrix> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, &self.params);
        let x = tape.constant(waveform.to_vec(), &[waveform.len()])?;
        let z = self.encoder.forward(&b, &x)?;
        let c = self.context.forward(&b, &z.0)?;
        let (rows, cols) = c.dims2()?;
        FeatureMatrix::new(rows, cols, c.to_vec())
    }
}

/// `contrastive + α · diversity`; with `α = 0` the diversity term is left
/// off the graph entirely.
pub fn masked_objective(contrastive: &Tensor, diversity: &Tensor, alpha: f32) -> Result<Tensor> {
    if alpha == 0.0 {
        Ok(contrastive.clone())
    } else {
        contrastive.add(&diversity.scale(alpha))
    }
}

/// Components of each record: mean contrastive loss per masked step, then
/// the diversity penalty. `loss = contrastive + α · diversity`.
pub fn pretrain_masked(
    corpus: &[AudioBuffer],
    config: &MaskedConfig,
    options: &TrainOptions,
) -> Result<(MaskedModel, Vec<StepRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let mut model = MaskedModel::new(config, options.seed)?;
    let mut batches = BatchStream::new(
        corpus.iter().map(AudioBuffer::duration).collect(),
        options.batch_seconds,
        stream(options.seed, Stream::Data),
    )?;
    let mut mask_rng = stream(options.seed, Stream::Mask);
    let mut rng = stream(options.seed, Stream::Gumbel);
    let mut params = std::mem::take(&mut model.params);
    let records = optimize(&mut params, options, |step, b| {
        let tau = model.config.tau_at(step);
        let mut contrastive: Option<Tensor> = None;
        let mut probs = Vec::new();
        let mut masked = 0usize;
        for i in batches.next_batch()? {
            let s = model.step_loss(b, &corpus[i].samples, tau, &mut mask_rng, &mut rng)?;
            masked += s.masked;
            probs.push(s.probs);
            contrastive = Some(match contrastive {
                Some(a) => a.add(&s.contrastive)?,
                None => s.contrastive,
            });
        }
        let contrastive = contrastive.expect("non-empty batch").scale(1.0 / masked as f32);
        let refs: Vec<&Tensor> = probs.iter().collect();
        let all_probs = b.tape().concat(&refs, 0)?;
        let q = model.config.quantizer;
        let diversity = diversity_loss(&all_probs, q.groups, q.entries)?;
        let components = vec![contrastive.item(), diversity.item()];
        Ok((masked_objective(&contrastive, &diversity, model.config.diversity_weight)?, components))
    })?;
    model.params = params;
    Ok((model, records))
}
