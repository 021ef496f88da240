//! Downstream recognizer: 1-D conv front-end, skip-connected bidirectional
//! LSTM stack, CTC loss, greedy decoding and WER/CER scoring.

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{conv_output_len, Binder, Conv1dLayer, Direction, Linear, LstmLayer, ParamSet};
use crate::parallel;
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor};
use crate::train::{optimize, BatchStream, StepRecord, TrainOptions};

pub const BLANK: usize = 0;
pub const KERNEL_SIZE: usize = 3;
/// Default audio per ASR batch, in seconds.
pub const DEFAULT_BATCH_SECONDS: f64 = 320.0;
/// Feature rates at or above this use the (2,1,1) stride preset.
pub const HALF_RATE_THRESHOLD_HZ: f64 = 75.0;
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;
pub const BRUTE_FORCE_MAX_VOCAB: usize = 5;

/// Symbol inventory; index 0 is the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    /// Blank, space, apostrophe, `a`..`z`.
    pub fn characters() -> Self {
        let mut symbols = vec!['_', ' ', '\''];
        symbols.extend('a'..='z');
        Self { symbols }
    }

    /// Blank plus `tokens` letters `a, b, ...`, matching the synthetic corpus.
    pub fn synthetic(tokens: usize) -> Result<Self> {
        if tokens == 0 || tokens > 26 {
            return Err(Error::Config(format!("synthetic vocabulary needs 1..=26 tokens, got {tokens}")));
        }
        let mut symbols = vec!['_'];
        symbols.extend((0..tokens as u8).map(|v| (b'a' + v) as char));
        Ok(Self { symbols })
    }

    /// Size including the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 1
    }

    fn has_space(&self) -> bool {
        self.symbols.contains(&' ')
    }

    /// Text to token indices. Whitespace separates tokens when the vocabulary
    /// has no space symbol; other unknown characters are rejected.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let space = self.has_space();
        let mut out = Vec::with_capacity(text.len());
        for ch in text.trim().chars() {
            let ch = ch.to_ascii_lowercase();
            if ch.is_whitespace() && !space {
                continue;
            }
            match self.symbols.iter().skip(1).position(|&s| s == ch) {
                Some(i) => out.push(i + 1),
                None => return Err(Error::Contract(format!("character {ch:?} is not in the vocabulary"))),
            }
        }
        Ok(out)
    }

    /// Token indices to text; blanks are dropped. Without a space symbol the
    /// tokens are joined by single spaces.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let chars = tokens.iter().filter(|&&t| t != BLANK && t < self.symbols.len()).map(|&t| self.symbols[t]);
        if self.has_space() {
            chars.collect()
        } else {
            chars.map(String::from).collect::<Vec<_>>().join(" ")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsrConfig {
    pub input_dim: usize,
    pub conv_units: Vec<usize>,
    pub strides: Vec<usize>,
    pub rnn_layers: usize,
    pub rnn_units: usize,
    /// Output classes including the blank.
    pub vocab_size: usize,
    /// Input frames per second.
    pub feature_rate: f64,
}

impl AsrConfig {
    pub fn paper(input_dim: usize, vocab_size: usize, feature_rate: f64) -> Self {
        Self {
            input_dim,
            conv_units: vec![640, 480, 320],
            strides: Self::strides_for_rate(feature_rate),
            rnn_layers: 10,
            rnn_units: 320,
            vocab_size,
            feature_rate,
        }
    }

    pub fn desk(input_dim: usize, vocab_size: usize, feature_rate: f64) -> Self {
        Self {
            conv_units: vec![64, 48, 32],
            rnn_layers: 2,
            rnn_units: 64,
            ..Self::paper(input_dim, vocab_size, feature_rate)
        }
    }

    /// (2,1,1) for 100 Hz features, (1,1,1) for half-rate features.
    pub fn strides_for_rate(rate: f64) -> Vec<usize> {
        if rate >= HALF_RATE_THRESHOLD_HZ {
            vec![2, 1, 1]
        } else {
            vec![1, 1, 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("ASR input width must be positive".into()));
        }
        if self.conv_units.len() != 3 || self.conv_units.contains(&0) {
            return Err(Error::Config("ASR needs three positive conv widths".into()));
        }
        if self.strides != [2, 1, 1] && self.strides != [1, 1, 1] {
            return Err(Error::Config(format!("ASR strides must be (2,1,1) or (1,1,1), got {:?}", self.strides)));
        }
        if self.rnn_layers == 0 || self.rnn_units == 0 {
            return Err(Error::Config("ASR needs at least one recurrent layer with positive width".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("ASR vocabulary needs a blank and at least one symbol".into()));
        }
        if !(self.feature_rate > 0.0) {
            return Err(Error::Config("feature rate must be positive".into()));
        }
        Ok(())
    }

    /// Output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.strides
            .iter()
            .fold(frames, |len, &s| conv_output_len(len, KERNEL_SIZE, s, 1).unwrap_or(0))
    }
}

/// Frames CTC needs for `target`: one per token plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct ConvBlock {
    conv: Conv1dLayer,
    skip: Option<Skip>,
}

enum Skip {
    Identity,
    Projection(Linear),
}

impl Skip {
    fn new(params: &mut ParamSet, name: &str, from: usize, to: usize, rng: &mut crate::rng::Rng) -> Self {
        if from == to {
            Skip::Identity
        } else {
            Skip::Projection(Linear::new(params, name, from, to, false, rng))
        }
    }

    fn apply(&self, b: &Binder, input: &Tensor, output: &Tensor) -> Result<Tensor> {
        match self {
            Skip::Identity => output.add(input),
            Skip::Projection(p) => output.add(&p.forward(b, input)?),
        }
    }
}

struct RecurrentBlock {
    fwd: LstmLayer,
    bwd: LstmLayer,
    proj: Linear,
    skip: Skip,
}

/// Conv front-end and bidirectional recurrent stack with a per-frame
/// log-softmax output.
pub struct AsrModel {
    pub config: AsrConfig,
    pub params: ParamSet,
    convs: Vec<ConvBlock>,
    rnns: Vec<RecurrentBlock>,
    output: Linear,
}

impl AsrModel {
    pub fn new(config: &AsrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut width = config.input_dim;
        for (i, (&units, &stride)) in config.conv_units.iter().zip(&config.strides).enumerate() {
            let name = format!("conv{i}");
            let conv = Conv1dLayer::new(&mut params, &name, width, units, KERNEL_SIZE, stride, 1, &mut rng)?;
            let skip = (i > 0).then(|| Skip::new(&mut params, &format!("{name}.skip"), width, units, &mut rng));
            convs.push(ConvBlock { conv, skip });
            width = units;
        }
        let mut rnns = Vec::new();
        let u = config.rnn_units;
        for i in 0..config.rnn_layers {
            let name = format!("rnn{i}");
            let fwd = LstmLayer::new(&mut params, &format!("{name}.fwd"), width, u, Direction::Forward, &mut rng);
            let bwd = LstmLayer::new(&mut params, &format!("{name}.bwd"), width, u, Direction::Backward, &mut rng);
            let proj = Linear::new(&mut params, &format!("{name}.proj"), 2 * u, u, true, &mut rng);
            let skip = Skip::new(&mut params, &format!("{name}.skip"), width, u, &mut rng);
            rnns.push(RecurrentBlock { fwd, bwd, proj, skip });
            width = u;
        }
        let output = Linear::new(&mut params, "output", width, config.vocab_size, true, &mut rng);
        Ok(Self { config: config.clone(), params, convs, rnns, output })
    }

    /// Rebuilds a model around stored parameters, which must match the
    /// layout `config` implies.
    pub fn from_params(config: &AsrConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        crate::cpc::check_same_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    /// `[frames × input_dim]` to `[frames' × vocab]` log-probabilities.
    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::dim(format!("ASR expects feature width {}, got {d}", self.config.input_dim)));
        }
        let mut h = x.clone();
        for block in &self.convs {
            let y = block.conv.forward(b, &h.transpose()?)?.relu().transpose()?;
            h = match &block.skip {
                Some(skip) => skip.apply(b, &h, &y)?,
                None => y,
            };
        }
        for block in &self.rnns {
            let both = b.tape().concat(&[&block.fwd.forward(b, &h)?, &block.bwd.forward(b, &h)?], 1)?;
            let y = block.proj.forward(b, &both)?;
            h = block.skip.apply(b, &h, &y)?;
        }
        self.output.forward(b, &h)?.log_softmax(1)
    }

    pub fn log_probs(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, &self.params);
        let x = tape.constant(features.data().to_vec(), &[features.rows(), features.cols()])?;
        let y = self.forward(&b, &x)?;
        let (rows, cols) = y.dims2()?;
        FeatureMatrix::new(rows, cols, y.to_vec())
    }

    pub fn transcribe(&self, features: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(greedy_decode(&self.log_probs(features)?))
    }
}

/// Forward and backward log-probability tables over the blank-interleaved
/// target (length `2L+1`).
#[derive(Clone, Debug)]
pub struct CtcLattice {
    pub labels: Vec<usize>,
    pub frames: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl CtcLattice {
    /// `log_probs` is `[frames × vocab]` row-major.
    pub fn new(log_probs: &[f32], vocab: usize, target: &[usize]) -> Result<Self> {
        if vocab == 0 || log_probs.len() % vocab != 0 {
            return Err(Error::dim(format!("{} log-probabilities do not split into rows of {vocab}", log_probs.len())));
        }
        let frames = log_probs.len() / vocab;
        if let Some(&t) = target.iter().find(|&&t| t == BLANK || t >= vocab) {
            return Err(Error::Contract(format!("target token {t} outside 1..{vocab}")));
        }
        if frames == 0 || frames < min_frames(target) {
            return Err(Error::Alignment { frames, target_len: target.len() });
        }
        let mut labels = Vec::with_capacity(2 * target.len() + 1);
        labels.push(BLANK);
        for &t in target {
            labels.push(t);
            labels.push(BLANK);
        }
        let s_len = labels.len();
        let lp = |t: usize, s: usize| log_probs[t * vocab + labels[s]] as f64;
        let skip_ok = |s: usize| labels[s] != BLANK && s >= 2 && labels[s] != labels[s - 2];
        let neg = f64::NEG_INFINITY;

        let mut alpha = vec![neg; frames * s_len];
        alpha[0] = lp(0, 0);
        if s_len > 1 {
            alpha[1] = lp(0, 1);
        }
        for t in 1..frames {
            for s in 0..s_len {
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut acc = prev[s];
                if s >= 1 {
                    acc = lse2(acc, prev[s - 1]);
                }
                if skip_ok(s) {
                    acc = lse2(acc, prev[s - 2]);
                }
                alpha[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, s) };
            }
        }

        let mut beta = vec![neg; frames * s_len];
        let last = (frames - 1) * s_len;
        beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
        if s_len > 1 {
            beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
        }
        for t in (0..frames - 1).rev() {
            for s in 0..s_len {
                let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
                let mut acc = next[s];
                if s + 1 < s_len {
                    acc = lse2(acc, next[s + 1]);
                }
                if s + 2 < s_len && skip_ok(s + 2) {
                    acc = lse2(acc, next[s + 2]);
                }
                beta[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, s) };
            }
        }
        Ok(Self { labels, frames, alpha, beta })
    }

    /// `log p(target)` from the forward table.
    pub fn forward_log_likelihood(&self) -> f64 {
        let s = self.labels.len();
        let row = &self.alpha[(self.frames - 1) * s..];
        if s > 1 {
            lse2(row[s - 1], row[s - 2])
        } else {
            row[0]
        }
    }

    /// `log p(target)` from the backward table.
    pub fn backward_log_likelihood(&self) -> f64 {
        if self.labels.len() > 1 {
            lse2(self.beta[0], self.beta[1])
        } else {
            self.beta[0]
        }
    }

    /// Gradient of `−log p(target)` with respect to each log-probability.
    pub fn gradient(&self, log_probs: &[f32], vocab: usize) -> Vec<f32> {
        let s_len = self.labels.len();
        let log_z = self.forward_log_likelihood();
        let mut grad = vec![0.0f64; self.frames * vocab];
        for t in 0..self.frames {
            for (s, &k) in self.labels.iter().enumerate() {
                let a = self.alpha[t * s_len + s];
                let b = self.beta[t * s_len + s];
                if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                    continue;
                }
                grad[t * vocab + k] -= (a + b - log_probs[t * vocab + k] as f64 - log_z).exp();
            }
        }
        grad.into_iter().map(|g| g as f32).collect()
    }
}

/// `−log p(target | log_probs)` for `log_probs: [frames × vocab]`.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<Tensor> {
    let (_, vocab) = log_probs.dims2()?;
    let values = log_probs.to_vec();
    let lattice = CtcLattice::new(&values, vocab, target)?;
    let loss = -lattice.forward_log_likelihood();
    let grad = if log_probs.requires_grad() { lattice.gradient(&values, vocab) } else { vec![0.0; values.len()] };
    Ok(log_probs.precomputed_scalar(loss as f32, grad))
}

/// Blank/repeat collapse of a frame-level path.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// `−log p(target)` by enumerating every frame-level path. Returns `+∞` when
/// no path collapses to `target`.
pub fn ctc_brute_force(log_probs: &FeatureMatrix, target: &[usize]) -> Result<f64> {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    if frames > BRUTE_FORCE_MAX_FRAMES || vocab > BRUTE_FORCE_MAX_VOCAB {
        return Err(Error::OracleScope { max_frames: BRUTE_FORCE_MAX_FRAMES, max_vocab: BRUTE_FORCE_MAX_VOCAB });
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs.row(t)[k] as f64).sum();
            total = lse2(total, lp);
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(-total);
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax, then blank/repeat collapse.
pub fn greedy_decode(log_probs: &FeatureMatrix) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .row_iter()
        .map(|row| row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best }))
        .collect();
    collapse(&path)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditDistance {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditDistance {
    let (n, m) = (reference.len(), hyp.len());
    // Cells hold (distance, substitutions, insertions, deletions).
    let mut prev: Vec<EditDistance> = (0..=m)
        .map(|j| EditDistance { distance: j, insertions: j, ..Default::default() })
        .collect();
    for i in 1..=n {
        let mut row = Vec::with_capacity(m + 1);
        row.push(EditDistance { distance: i, deletions: i, ..Default::default() });
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let diag = prev[j - 1];
            let mut best = EditDistance {
                distance: diag.distance + usize::from(!same),
                substitutions: diag.substitutions + usize::from(!same),
                ..diag
            };
            let up = prev[j];
            if up.distance + 1 < best.distance {
                best = EditDistance { distance: up.distance + 1, deletions: up.deletions + 1, ..up };
            }
            let left = row[j - 1];
            if left.distance + 1 < best.distance {
                best = EditDistance { distance: left.distance + 1, insertions: left.insertions + 1, ..left };
            }
            row.push(best);
        }
        prev = row;
    }
    prev[m]
}

/// Corpus-level rate: total edit distance over total reference length.
pub fn error_rate<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::dim(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::UndefinedRate);
    }
    let dist: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r).distance).sum();
    Ok(dist as f64 / total as f64)
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word error rate over whitespace-separated words.
pub fn wer(hyps: &[String], refs: &[String]) -> Result<f64> {
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| words(s)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| words(s)).collect();
    error_rate(&h, &r)
}

/// Symbol error rate over vocabulary tokens (characters, including spaces,
/// for the character vocabulary; tokens for the synthetic one).
pub fn cer(vocab: &Vocabulary, hyps: &[String], refs: &[String]) -> Result<f64> {
    let h = hyps.iter().map(|s| vocab.encode(s)).collect::<Result<Vec<_>>>()?;
    let r = refs.iter().map(|s| vocab.encode(s)).collect::<Result<Vec<_>>>()?;
    error_rate(&h, &r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    /// Token-level edit distance.
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub utterances: Vec<UtteranceScore>,
    pub wer: f64,
    pub cer: f64,
}

impl ScoreReport {
    /// `id<TAB>ref<TAB>hyp<TAB>dist` lines, then `WER<TAB>v` and `CER<TAB>v`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", u.id, u.reference, u.hypothesis, u.distance));
        }
        out.push_str(&format!("WER\t{:.6}\nCER\t{:.6}\n", self.wer, self.cer));
        out
    }
}

/// Labeled utterance for training or evaluation.
#[derive(Clone, Debug)]
pub struct AsrExample {
    pub id: String,
    pub features: FeatureMatrix,
    pub transcript: String,
}

/// Greedy-decodes every example (in parallel) and scores the corpus.
pub fn evaluate(model: &AsrModel, vocab: &Vocabulary, examples: &[AsrExample]) -> Result<ScoreReport> {
    let decoded = parallel::map(examples, |ex| -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((model.transcribe(&ex.features)?, vocab.encode(&ex.transcript)?))
    });
    let mut utterances = Vec::with_capacity(examples.len());
    let (mut hyps, mut refs, mut hyp_text, mut ref_text) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (ex, d) in examples.iter().zip(decoded) {
        let (hyp, reference) = d?;
        let hypothesis = vocab.decode(&hyp);
        let reference_text = vocab.decode(&reference);
        utterances.push(UtteranceScore {
            id: ex.id.clone(),
            reference: reference_text.clone(),
            hypothesis: hypothesis.clone(),
            distance: edit_distance(&hyp, &reference).distance,
        });
        hyps.push(hyp);
        refs.push(reference);
        hyp_text.push(hypothesis);
        ref_text.push(reference_text);
    }
    Ok(ScoreReport { utterances, wer: wer(&hyp_text, &ref_text)?, cer: error_rate(&hyps, &refs)? })
}

#[derive(Clone, Debug)]
pub struct AsrTrainLog {
    pub records: Vec<StepRecord>,
    /// Ids of examples dropped because their targets cannot be aligned.
    pub skipped: Vec<String>,
}

/// Trains a fresh model with CTC on duration-budgeted batches. The loss is
/// the batch mean of per-utterance CTC losses.
pub fn train_asr(
    examples: &[AsrExample],
    vocab: &Vocabulary,
    config: &AsrConfig,
    options: &TrainOptions,
) -> Result<(AsrModel, AsrTrainLog)> {
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "ASR output size {} does not match the vocabulary size {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut model = AsrModel::new(config, options.seed)?;
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for ex in examples {
        if ex.features.cols() != config.input_dim {
            return Err(Error::dim(format!(
                "{}: feature width {} but ASR expects {}",
                ex.id,
                ex.features.cols(),
                config.input_dim
            )));
        }
        let target = vocab.encode(&ex.transcript)?;
        if config.output_frames(ex.features.rows()) < min_frames(&target).max(1) {
            log::warn!("skipping {}: {} frames cannot align {} tokens", ex.id, ex.features.rows(), target.len());
            skipped.push(ex.id.clone());
        } else {
            usable.push((ex, target));
        }
    }
    if usable.is_empty() {
        return Err(Error::Config("no alignable training examples".into()));
    }
    let durations = usable.iter().map(|(ex, _)| ex.features.rows() as f64 / config.feature_rate).collect();
    let mut batches = BatchStream::new(durations, options.batch_seconds, stream(options.seed, Stream::Data))?;
    let mut params = std::mem::take(&mut model.params);
    let records = optimize(&mut params, options, |_, b| {
        let batch = batches.next_batch()?;
        let mut sum: Option<Tensor> = None;
        for &i in &batch {
            let (ex, target) = &usable[i];
            let f = &ex.features;
            let x = b.tape().constant(f.data().to_vec(), &[f.rows(), f.cols()])?;
            let l = ctc_loss(&model.forward(b, &x)?, target)?;
            sum = Some(match sum {
                Some(s) => s.add(&l)?,
                None => l,
            });
        }
        let loss = sum.expect("non-empty batch").scale(1.0 / batch.len() as f32);
        Ok((loss, Vec::new()))
    })?;
    model.params = params;
    Ok((model, AsrTrainLog { records, skipped }))
}
