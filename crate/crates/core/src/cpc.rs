//! The wav2vec-style contrastive model: a strided convolutional encoder, one
//! or two LSTM context networks on a shared encoder, and the binary
//! contrastive loss over `K` future (or past) offsets.

use rand::Rng as _;

use crate::data::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{conv_output_len, Binder, Conv1dLayer, Direction, GroupNormLayer, LstmStack, Param, ParamSet};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{Tape, Tensor};
use crate::train::{optimize, BatchStream, StepRecord, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub groups: usize,
    pub relu_cap: f32,
}

impl EncoderConfig {
    /// Full-size encoder: 64 to 512 filters, 160x downsampling.
    pub fn paper() -> Self {
        Self {
            filters: vec![64, 128, 192, 256, 512, 512],
            kernels: vec![10, 8, 4, 4, 4, 1],
            strides: vec![5, 4, 2, 2, 2, 1],
            groups: 32,
            relu_cap: 5.0,
        }
    }

    /// Same kernels and strides with a quarter of the filters.
    pub fn desk() -> Self {
        Self {
            filters: vec![16, 32, 48, 64, 128, 128],
            groups: 16,
            ..Self::paper()
        }
    }

    /// Appends a layer so the output rate halves.
    pub fn with_extra_stride(mut self, kernel: usize, stride: usize) -> Self {
        let last = *self.filters.last().unwrap_or(&1);
        self.filters.push(last);
        self.kernels.push(kernel);
        self.strides.push(stride);
        self
    }

    /// Same geometry with every layer `width` filters wide.
    pub fn with_constant_width(&self, width: usize) -> Self {
        Self { filters: vec![width; self.filters.len()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filters.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "encoder lists must be non-empty and equal length (filters {}, kernels {}, strides {})",
                n,
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.filters.iter().chain(&self.kernels).chain(&self.strides).any(|&v| v == 0) {
            return Err(Error::Config("encoder filters, kernels and strides must be positive".into()));
        }
        if let Some(f) = self.filters.iter().find(|&&f| self.groups == 0 || f % self.groups != 0) {
            return Err(Error::Config(format!("{f} encoder filters are not divisible into {} groups", self.groups)));
        }
        if !(self.relu_cap > 0.0) {
            return Err(Error::Config("encoder ReLU cap must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.filters.last().unwrap_or(&0)
    }

    /// Input samples per output frame.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Output length of every layer for a `samples`-long input.
    pub fn layer_lengths(&self, samples: usize) -> Option<Vec<usize>> {
        let mut len = samples;
        self.kernels
            .iter()
            .zip(&self.strides)
            .map(|(&k, &s)| {
                len = conv_output_len(len, k, s, 0)?;
                Some(len)
            })
            .collect()
    }

    pub fn output_len(&self, samples: usize) -> Option<usize> {
        self.layer_lengths(samples).and_then(|l| l.last().copied())
    }

    /// Shortest input that yields one output frame.
    pub fn min_input_len(&self) -> usize {
        self.kernels.iter().zip(&self.strides).rev().fold(1, |len, (&k, &s)| k + (len - 1) * s)
    }

    /// Activation elements produced by all conv layers: Σ filters · length.
    pub fn activation_elements(&self, samples: usize) -> Option<usize> {
        let lens = self.layer_lengths(samples)?;
        Some(lens.iter().zip(&self.filters).map(|(l, f)| l * f).sum())
    }
}

/// Encoder output `z`, `[U × D]`.
#[derive(Clone)]
pub struct LatentSequence(pub Tensor);

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Context outputs `c`, one `[U × C]` tensor per context network.
#[derive(Clone)]
pub struct ContextSequence {
    pub per_network: Vec<Tensor>,
}

impl ContextSequence {
    /// Per-network outputs joined along the feature axis.
    pub fn combined(&self) -> Result<Tensor> {
        match self.per_network.as_slice() {
            [single] => Ok(single.clone()),
            [first, ..] => {
                let refs: Vec<&Tensor> = self.per_network.iter().collect();
                first.tape().concat(&refs, 1)
            }
            [] => Err(Error::Contract("context sequence without networks".into())),
        }
    }
}

/// Conv → group norm → clipped ReLU, repeated.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<Conv1dLayer>,
    norms: Vec<GroupNormLayer>,
}

impl Encoder {
    pub fn new(params: &mut ParamSet, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 1;
        for (i, ((&f, &k), &s)) in config.filters.iter().zip(&config.kernels).zip(&config.strides).enumerate() {
            convs.push(Conv1dLayer::new(params, &format!("{name}.conv{i}"), in_ch, f, k, s, 0, rng)?);
            norms.push(GroupNormLayer::new(params, &format!("{name}.norm{i}"), config.groups, f)?);
            in_ch = f;
        }
        Ok(Self { config: config.clone(), convs, norms })
    }

    /// `waveform: [T]` → `z: [U × D]`.
    pub fn forward(&self, b: &Binder, waveform: &Tensor) -> Result<LatentSequence> {
        let t = waveform.numel();
        if self.config.output_len(t).is_none() {
            return Err(Error::InputTooShort { required: self.config.min_input_len(), actual: t });
        }
        let mut h = waveform.reshape(&[1, t])?;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = norm.forward(b, &conv.forward(b, &h)?)?.relu_clipped(self.config.relu_cap);
        }
        Ok(LatentSequence(h.transpose()?))
    }
}

/// Which context networks sit on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// A single forward network.
    Unidirectional,
    /// Two independent forward networks, concatenated: the parameter-matched
    /// baseline for `Bidirectional`.
    UnidirectionalDouble,
    /// A forward and a backward network.
    Bidirectional,
}

impl ContextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::Unidirectional => "uni",
            ContextMode::UnidirectionalDouble => "uni2x",
            ContextMode::Bidirectional => "bi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(ContextMode::Unidirectional),
            "uni2x" => Ok(ContextMode::UnidirectionalDouble),
            "bi" => Ok(ContextMode::Bidirectional),
            other => Err(Error::Config(format!("unknown context mode {other:?} (uni, uni2x, bi)"))),
        }
    }

    /// `(parameter prefix, direction)` of each network.
    pub fn networks(self) -> &'static [(&'static str, Direction)] {
        match self {
            ContextMode::Unidirectional => &[("context.fwd", Direction::Forward)],
            ContextMode::UnidirectionalDouble => {
                &[("context.fwd", Direction::Forward), ("context.fwd2", Direction::Forward)]
            }
            ContextMode::Bidirectional => &[("context.fwd", Direction::Forward), ("context.bwd", Direction::Backward)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpcConfig {
    pub encoder: EncoderConfig,
    pub context_layers: usize,
    pub context_units: usize,
    pub offsets: usize,
    pub distractors: usize,
    pub mode: ContextMode,
    pub negative_weight: f32,
}

impl CpcConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            context_layers: 2,
            context_units: 128,
            offsets: 4,
            distractors: 4,
            mode: ContextMode::Unidirectional,
            negative_weight: 1.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            context_layers: 4,
            context_units: 512,
            offsets: 12,
            distractors: 10,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.offsets == 0 {
            return Err(Error::Config("offset count K must be at least 1".into()));
        }
        if self.distractors == 0 {
            return Err(Error::Config("distractor count must be at least 1".into()));
        }
        if self.context_layers == 0 || self.context_units == 0 {
            return Err(Error::Config("context network needs at least one layer and unit".into()));
        }
        if !(self.negative_weight >= 0.0) {
            return Err(Error::Config("negative weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of the extracted representation.
    pub fn feature_width(&self) -> usize {
        self.context_units * self.mode.networks().len()
    }
}

/// `log σ(zᵀ H c)` for vectors `z`, `c` and a square `H`.
pub fn sim_k(z: &Tensor, c: &Tensor, h: &Tensor) -> Result<Tensor> {
    let d = z.numel();
    let zh = z.reshape(&[1, d])?.matmul(h)?;
    let s = zh.matmul(&c.reshape(&[c.numel(), 1])?)?;
    Ok(s.reshape(&[])?.log_sigmoid())
}

/// `count` zero-based indices drawn i.i.d. uniformly from `0..len`.
pub fn sample_distractors(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len.max(1))).collect()
}

/// Distractor indices per context position: row `i` holds the draws used
/// with `c_i` at every offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistractorTable {
    len: usize,
    per_step: usize,
    indices: Vec<usize>,
}

impl DistractorTable {
    pub fn sample(len: usize, per_step: usize, rng: &mut Rng) -> Self {
        let indices = (0..len).flat_map(|_| sample_distractors(len, per_step, rng)).collect();
        Self { len, per_step, indices }
    }

    pub fn from_indices(len: usize, per_step: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != len * per_step {
            return Err(Error::dim(format!("{len}×{per_step} distractor table given {} indices", indices.len())));
        }
        if indices.iter().any(|&i| i >= len) {
            return Err(Error::dim(format!("distractor index out of range for length {len}")));
        }
        Ok(Self { len, per_step, indices })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn per_step(&self) -> usize {
        self.per_step
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.per_step..(i + 1) * self.per_step]
    }

    /// The table that pairs with time-reversed sequences.
    pub fn reversed(&self) -> Self {
        let n = self.len;
        let indices = (0..n).rev().flat_map(|i| self.row(i).iter().map(move |&d| n - 1 - d)).collect();
        Self { len: n, per_step: self.per_step, indices }
    }
}

/// Number of positive terms `Σ_k (U − k)`.
pub fn prediction_terms(len: usize, offsets: usize) -> usize {
    (1..=offsets).map(|k| len.saturating_sub(k)).sum()
}

/// Summed contrastive loss over offsets `k = 1..=K`:
/// `−Σ_k Σ_i [log σ(z_tᵀ H_k c_i) + λ Σ_d log σ(−z_dᵀ H_k c_i)]`
/// where `t = i + k` (forward) or `t = i − k` (backward).
///
/// `steps[k−1]` is `H_kᵀ`, shape `[C × D]`.
pub fn wav2vec_loss(
    z: &Tensor,
    c: &Tensor,
    steps: &[Tensor],
    direction: Direction,
    table: &DistractorTable,
    negative_weight: f32,
) -> Result<Tensor> {
    let (u, _) = z.dims2()?;
    let (uc, _) = c.dims2()?;
    let k_max = steps.len();
    if uc != u || table.len() != u {
        return Err(Error::dim(format!("latents {u}, contexts {uc}, distractor rows {} differ", table.len())));
    }
    if u <= k_max {
        return Err(Error::DegenerateSequence { length: u, offsets: k_max });
    }
    let n = table.per_step();
    let zd = z.index_select(&table.indices)?;
    let mut total: Option<Tensor> = None;
    for (idx, step) in steps.iter().enumerate() {
        let k = idx + 1;
        let m = u - k;
        let hc = c.matmul(step)?;
        let (ctx_start, target_start) = match direction {
            Direction::Forward => (0, k),
            Direction::Backward => (k, 0),
        };
        let hc_ctx = hc.narrow(0, ctx_start, m)?;
        let pos = z.narrow(0, target_start, m)?.mul(&hc_ctx)?.sum(1)?;
        let mut term = pos.log_sigmoid().sum_all()?;
        if negative_weight != 0.0 {
            let rep: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, n)).collect();
            let neg = zd.narrow(0, ctx_start * n, m * n)?.mul(&hc_ctx.index_select(&rep)?)?.sum(1)?;
            let neg_term = neg.neg().log_sigmoid().sum_all()?.scale(negative_weight);
            term = term.add(&neg_term)?;
        }
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one offset").neg())
}

/// Sum of the forward and backward network losses on a shared `z`.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_loss(
    z: &Tensor,
    c_fwd: &Tensor,
    c_bwd: &Tensor,
    h_fwd: &[Tensor],
    h_bwd: &[Tensor],
    table_fwd: &DistractorTable,
    table_bwd: &DistractorTable,
    negative_weight: f32,
) -> Result<(Tensor, Tensor, Tensor)> {
    let f = wav2vec_loss(z, c_fwd, h_fwd, Direction::Forward, table_fwd, negative_weight)?;
    let b = wav2vec_loss(z, c_bwd, h_bwd, Direction::Backward, table_bwd, negative_weight)?;
    Ok((f.add(&b)?, f, b))
}

#[derive(Clone, Debug)]
pub struct ContextNetwork {
    pub name: String,
    pub direction: Direction,
    pub lstm: LstmStack,
    step_names: Vec<String>,
}

impl ContextNetwork {
    pub fn step_names(&self) -> &[String] {
        &self.step_names
    }

    pub fn steps(&self, b: &Binder) -> Result<Vec<Tensor>> {
        self.step_names.iter().map(|n| b.get(n)).collect()
    }
}

/// Raw per-network losses for one utterance.
pub struct CpcLoss {
    pub per_network: Vec<Tensor>,
    /// Positive terms per network.
    pub terms: usize,
}

#[derive(Clone, Debug)]
pub struct CpcModel {
    pub config: CpcConfig,
    pub params: ParamSet,
    encoder: Encoder,
    networks: Vec<ContextNetwork>,
}

impl CpcModel {
    /// Freshly initialized from the seed's init stream.
    pub fn new(config: &CpcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, "encoder", &config.encoder, &mut rng)?;
        let d = config.encoder.output_dim();
        let units = config.context_units;
        let networks = config
            .mode
            .networks()
            .iter()
            .map(|&(name, direction)| {
                let lstm = LstmStack::new(&mut params, name, d, units, config.context_layers, direction, &mut rng);
                let step_names: Vec<String> = (1..=config.offsets).map(|k| format!("{name}.step{k}")).collect();
                for s in &step_names {
                    params.insert(s.clone(), Param::uniform(&[units, d], 1.0 / (units as f32).sqrt(), &mut rng));
                }
                ContextNetwork { name: name.to_string(), direction, lstm, step_names }
            })
            .collect();
        Ok(Self { config: config.clone(), params, encoder, networks })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match
    /// the configuration exactly.
    pub fn from_params(config: &CpcConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        check_same_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn networks(&self) -> &[ContextNetwork] {
        &self.networks
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width()
    }

    /// Scalar count of the context networks and step transforms.
    pub fn context_param_count(&self) -> usize {
        self.params.num_elements_with_prefix("context.")
    }

    pub fn forward(&self, b: &Binder, waveform: &Tensor) -> Result<(LatentSequence, ContextSequence)> {
        let z = self.encoder.forward(b, waveform)?;
        let per_network = self.networks.iter().map(|n| n.lstm.forward(b, &z.0)).collect::<Result<_>>()?;
        Ok((z, ContextSequence { per_network }))
    }

    /// Raw (summed) loss per network; every network draws its own distractors.
    pub fn loss(&self, b: &Binder, waveform: &[f32], rng: &mut Rng) -> Result<CpcLoss> {
        let x = b.tape().constant(waveform.to_vec(), &[waveform.len()])?;
        let (z, c) = self.forward(b, &x)?;
        let u = z.len();
        let k = self.config.offsets;
        if u <= k {
            return Err(Error::DegenerateSequence { length: u, offsets: k });
        }
        let mut per_network = Vec::with_capacity(self.networks.len());
        for (net, ctx) in self.networks.iter().zip(&c.per_network) {
            let table = DistractorTable::sample(u, self.config.distractors, rng);
            let steps = net.steps(b)?;
            per_network.push(wav2vec_loss(&z.0, ctx, &steps, net.direction, &table, self.config.negative_weight)?);
        }
        Ok(CpcLoss { per_network, terms: prediction_terms(u, k) })
    }

    /// Concatenated context outputs without recording gradients.
    pub fn extract(&self, waveform: &[f32]) -> Result<FeatureMatrix> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, &self.params);
        let x = tape.constant(waveform.to_vec(), &[waveform.len()])?;
        let (_, c) = self.forward(&b, &x)?;
        let out = c.combined()?;
        let (rows, cols) = out.dims2()?;
        FeatureMatrix::new(rows, cols, out.to_vec())
    }
}

pub fn extract_representations(waveform: &[f32], model: &CpcModel) -> Result<FeatureMatrix> {
    model.extract(waveform)
}

pub(crate) fn check_same_layout(expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    for (name, p) in expected.iter() {
        match actual.get(name) {
            Some(q) if q.shape == p.shape => {}
            Some(q) => {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, configuration expects {:?}",
                    q.shape, p.shape
                )))
            }
            None => return Err(Error::Contract(format!("parameter {name} missing"))),
        }
    }
    if let Some((name, _)) = actual.iter().find(|(n, _)| !expected.contains(n)) {
        return Err(Error::Contract(format!("unexpected parameter {name}")));
    }
    Ok(())
}

/// Adam training on duration-budgeted batches. Each record's loss is the
/// batch loss per positive term; components hold each network's share.
pub fn pretrain(corpus: &[AudioBuffer], config: &CpcConfig, options: &TrainOptions) -> Result<(CpcModel, Vec<StepRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let mut model = CpcModel::new(config, options.seed)?;
    let mut batches = BatchStream::new(
        corpus.iter().map(AudioBuffer::duration).collect(),
        options.batch_seconds,
        stream(options.seed, Stream::Data),
    )?;
    let mut distractor_rng = stream(options.seed, Stream::Distractor);
    let mut params = std::mem::take(&mut model.params);
    let records = optimize(&mut params, options, |_, b| {
        let batch = batches.next_batch()?;
        let mut sums: Vec<Option<Tensor>> = vec![None; model.networks.len()];
        let mut terms = 0usize;
        for &i in &batch {
            let l = model.loss(b, &corpus[i].samples, &mut distractor_rng)?;
            terms += l.terms;
            for (acc, t) in sums.iter_mut().zip(l.per_network) {
                *acc = Some(match acc.take() {
                    Some(a) => a.add(&t)?,
                    None => t,
                });
            }
        }
        let inv = 1.0 / terms as f32;
        let parts: Vec<Tensor> = sums.into_iter().map(|s| s.expect("non-empty batch").scale(inv)).collect();
        let components: Vec<f32> = parts.iter().map(Tensor::item).collect();
        let mut loss = parts[0].clone();
        for p in &parts[1..] {
            loss = loss.add(p)?;
        }
        Ok((loss, if components.len() > 1 { components } else { Vec::new() }))
    })?;
    model.params = params;
    Ok((model, records))
}
