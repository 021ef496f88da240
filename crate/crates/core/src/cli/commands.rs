use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::RunConfig;
use super::formats::{Checkpoint, FeatureFile, FeatureIndex, IndexEntry, PcaFile};
use super::{EvalArgs, ExtractArgs, Objective, PcaArgs, PretrainArgs, SynthArgs, TrainAsrArgs};
use crate::asr::{evaluate, min_frames, train_asr, AsrExample, AsrModel, Vocabulary};
use crate::cpc::{pretrain, CpcModel};
use crate::data::{log_mel, read_wav, synth_corpus, Manifest, MelConfig, SynthConfig, SAMPLE_RATE};
use crate::diagnostics::{explained_variance_curve, linear_dimensionality, pca_fit_parts, render_curve, PcaModel, WHITEN_EPS};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::masked::{pretrain_masked, MaskedModel};
use crate::nn::{Param, ParamSet};
use crate::parallel;
use crate::train::StepRecord;

/// Added to the synthesis seed for the held-out split.
const HELDOUT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
const INPUT_MEAN: &str = "input.mean";
const INPUT_ROTATION: &str = "input.rotation";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn snapshot(cfg: &RunConfig, meta: &mut BTreeMap<String, String>) {
    for (k, v) in cfg.entries() {
        meta.insert(format!("config.{k}"), v.to_string());
    }
}

fn restore_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in &ckpt.metadata {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v).map_err(|e| Error::Contract(format!("checkpoint config snapshot: {e}")))?;
        }
    }
    Ok(cfg)
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.meta(key)?
        .parse()
        .map_err(|_| Error::Contract(format!("checkpoint metadata {key} is malformed")))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Loss log written beside a checkpoint as `<checkpoint>.log`.
fn write_log(
    ckpt: &Path,
    columns: &[&str],
    records: &[StepRecord],
    notes: &[String],
    started: u64,
    timestamps: bool,
) -> Result<PathBuf> {
    let mut text = String::new();
    if timestamps {
        text.push_str(&format!("# started_unix={started}\n"));
    }
    for n in notes {
        text.push_str(&format!("# {n}\n"));
    }
    text.push_str(&format!("step\tloss{}\n", columns.iter().map(|c| format!("\t{c}")).collect::<String>()));
    for r in records {
        text.push_str(&r.log_line());
        text.push('\n');
    }
    if timestamps {
        text.push_str(&format!("# finished_unix={}\n", unix_time()));
    }
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".log");
    let path = PathBuf::from(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn synth(args: &SynthArgs) -> Result<String> {
    let cfg = SynthConfig { num_utts: args.utts, tokens_per_utt: args.tokens, vocab_size: args.vocab, seed: args.seed };
    cfg.validate()?;
    let manifest = synth_corpus(&cfg, &args.out, "utt")?;
    let path = args.out.join("manifest.tsv");
    manifest.save(&path)?;
    let mut out = format!("manifest\t{}\nduration\t{:.3}\n", path.display(), manifest.total_duration());
    if args.heldout > 0 {
        let held = SynthConfig { num_utts: args.heldout, seed: args.seed.wrapping_add(HELDOUT_SEED_OFFSET), ..cfg };
        let manifest = synth_corpus(&held, &args.out, "heldout")?;
        let path = args.out.join("heldout.tsv");
        manifest.save(&path)?;
        out.push_str(&format!("heldout\t{}\nheldout_duration\t{:.3}\n", path.display(), manifest.total_duration()));
    }
    Ok(out)
}

pub fn pretrain_cmd(args: &PretrainArgs) -> Result<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.bidirectional {
        cfg.set("context.mode", "bi")?;
    }
    if let Some(steps) = args.steps {
        cfg.set("train.steps", &steps.to_string())?;
    }
    let manifest = Manifest::load(&args.manifest)?;
    let audio = manifest.load_audio()?;
    let options = cfg.pretrain_options(args.seed);
    let started = unix_time();
    let mut meta = BTreeMap::new();
    let (params, records, columns): (ParamSet, Vec<StepRecord>, Vec<&str>) = match args.objective {
        Objective::Cpc => {
            let model_cfg = cfg.cpc_config()?;
            let (model, records) = pretrain(&audio, &model_cfg, &options)?;
            let columns = match model_cfg.mode.networks().len() {
                1 => vec![],
                _ => model_cfg
                    .mode
                    .networks()
                    .iter()
                    .map(|(name, _)| match *name {
                        "context.bwd" => "loss_bwd",
                        "context.fwd2" => "loss_fwd2",
                        _ => "loss_fwd",
                    })
                    .collect(),
            };
            meta.insert("kind".into(), "cpc".into());
            (model.params, records, columns)
        }
        Objective::Masked => {
            let (model, records) = pretrain_masked(&audio, &cfg.masked_config()?, &options)?;
            meta.insert("kind".into(), "masked".into());
            (model.params, records, vec!["contrastive", "diversity"])
        }
    };
    meta.insert("seed".into(), args.seed.to_string());
    meta.insert("step".into(), records.len().to_string());
    snapshot(&cfg, &mut meta);
    let ckpt = Checkpoint { metadata: meta, params };
    ckpt.write(&args.out)?;
    let log = write_log(&args.out, &columns, &records, &[], started, !args.no_timestamps)?;
    let last = records.last().map_or(f32::NAN, |r| r.loss);
    Ok(format!("checkpoint\t{}\nlog\t{}\nfinal_loss\t{last:.6}\n", args.out.display(), log.display()))
}

/// A pretrained representation model loaded from a checkpoint.
pub enum Representation {
    Cpc(CpcModel),
    Masked(MaskedModel),
}

impl Representation {
    /// Loads a cpc or masked checkpoint; returns the model, its feature rate
    /// (Hz) and its feature width.
    pub fn load(path: &Path) -> Result<(Self, f64, usize)> {
        let ckpt = Checkpoint::read(path)?;
        let cfg = restore_config(&ckpt)?;
        match ckpt.meta("kind")? {
            "cpc" => {
                let c = cfg.cpc_config()?;
                let rate = SAMPLE_RATE as f64 / c.encoder.hop() as f64;
                let width = c.feature_width();
                Ok((Representation::Cpc(CpcModel::from_params(&c, ckpt.params)?), rate, width))
            }
            "masked" => {
                let c = cfg.masked_config()?;
                let rate = SAMPLE_RATE as f64 / c.encoder.hop() as f64;
                let width = c.feature_width();
                Ok((Representation::Masked(MaskedModel::from_params(&c, ckpt.params)?), rate, width))
            }
            other => Err(Error::Contract(format!("{} holds a {other} model, not a representation model", path.display()))),
        }
    }

    pub fn extract(&self, samples: &[f32]) -> Result<FeatureMatrix> {
        match self {
            Representation::Cpc(m) => m.extract(samples),
            Representation::Masked(m) => m.extract(samples),
        }
    }
}

pub fn extract(args: &ExtractArgs) -> Result<String> {
    let (model, rate, width) = Representation::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let features = parallel::map(&manifest.entries, |e| -> Result<FeatureMatrix> {
        model.extract(&read_wav(&e.path)?.samples)
    });
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut entries = Vec::with_capacity(features.len());
    for (e, f) in manifest.entries.iter().zip(features) {
        let f = f?;
        if f.cols() != width {
            return Err(Error::Contract(format!("{}: extracted width {} but the model declares {width}", e.id, f.cols())));
        }
        let path = args.out.join(format!("{}.csft", e.id));
        let rows = f.rows();
        FeatureFile { id: e.id.clone(), features: f }.write(&path)?;
        entries.push(IndexEntry { id: e.id.clone(), path, rows });
    }
    let index = FeatureIndex { feature_rate: rate, entries };
    let path = args.out.join("index.tsv");
    index.save(&path)?;
    Ok(format!("index\t{}\nutterances\t{}\nwidth\t{width}\nfeature_rate\t{rate}\n", path.display(), index.entries.len()))
}

pub fn pca(args: &PcaArgs) -> Result<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(t) = args.threshold {
        cfg.set("pca.threshold", &t.to_string())?;
    }
    if args.whiten {
        cfg.set("pca.whiten", "true")?;
    }
    if args.mean_only {
        cfg.set("pca.mean_only", "true")?;
    }
    let index = FeatureIndex::load(&args.index)?;
    if index.entries.is_empty() {
        return Err(Error::InsufficientData(format!("{} lists no features", args.index.display())));
    }
    let parts: Vec<FeatureMatrix> = index.load_features()?.into_iter().map(|f| f.features).collect();
    let full = pca_fit_parts(&parts)?;
    let threshold = cfg.float("pca.threshold");
    let dim = linear_dimensionality(&full, threshold)?;
    let model = if cfg.flag("pca.mean_only") { PcaModel::mean_only(&FeatureMatrix::vstack(&parts)?)? } else { full.clone() };
    PcaFile { model, whiten: cfg.flag("pca.whiten") }.write(&args.out)?;
    let curve_path = args.curve.clone().unwrap_or_else(|| {
        let mut name = args.out.as_os_str().to_owned();
        name.push(".curve");
        PathBuf::from(name)
    });
    std::fs::write(&curve_path, render_curve(&explained_variance_curve(&full))).map_err(|e| Error::io(&curve_path, e))?;
    let mut out = format!(
        "model\t{}\ncurve\t{}\nlinear_dimensionality\t{dim}\nthreshold\t{threshold}\n",
        args.out.display(),
        curve_path.display()
    );
    if full.degenerate {
        out.push_str("warning\tzero total variance\n");
    }
    Ok(out)
}

/// Input transform stored with an ASR checkpoint: `(x − mean)·Rᵀ`.
struct InputTransform {
    mean: Vec<f32>,
    rotation: Vec<f32>,
}

impl InputTransform {
    fn from_pca(file: &PcaFile) -> Self {
        let m = &file.model;
        let d = m.dim();
        let mut rotation = Vec::with_capacity(d * d);
        for j in 0..d {
            let s = if file.whiten { 1.0 / (m.explained_variance[j] + WHITEN_EPS).sqrt() } else { 1.0 };
            rotation.extend(m.component(j).iter().map(|&c| (c * s) as f32));
        }
        Self { mean: m.mean.iter().map(|&v| v as f32).collect(), rotation }
    }

    fn from_params(params: &ParamSet) -> Option<Self> {
        Some(Self { mean: params.get(INPUT_MEAN)?.data.clone(), rotation: params.get(INPUT_ROTATION)?.data.clone() })
    }

    fn store(&self, params: &mut ParamSet) {
        let d = self.mean.len();
        params.insert(INPUT_MEAN, Param { shape: vec![d], data: self.mean.clone() });
        params.insert(INPUT_ROTATION, Param { shape: vec![d, d], data: self.rotation.clone() });
    }

    fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let d = self.mean.len();
        if x.cols() != d {
            return Err(Error::Contract(format!("features have width {}, the input transform expects {d}", x.cols())));
        }
        let mut out = Vec::with_capacity(x.rows() * d);
        let mut centered = vec![0.0f64; d];
        for row in x.row_iter() {
            centered.iter_mut().zip(row).zip(&self.mean).for_each(|((c, &v), &m)| *c = v as f64 - m as f64);
            for j in 0..d {
                let r = &self.rotation[j * d..(j + 1) * d];
                out.push(r.iter().zip(&centered).map(|(&a, b)| a as f64 * b).sum::<f64>() as f32);
            }
        }
        FeatureMatrix::new(x.rows(), d, out)
    }
}

/// Features for every manifest entry, from an index or computed as log mels.
fn load_inputs(index: Option<&Path>, logmel: bool, manifest: &Manifest) -> Result<(Vec<AsrExample>, f64)> {
    let transcripts: BTreeMap<&str, &str> = manifest.entries.iter().map(|e| (e.id.as_str(), e.transcript.as_str())).collect();
    match (index, logmel) {
        (Some(path), false) => {
            let index = FeatureIndex::load(path)?;
            let files = index.load_features()?;
            let examples = files
                .into_iter()
                .map(|f| {
                    let transcript = transcripts
                        .get(f.id.as_str())
                        .ok_or_else(|| Error::Contract(format!("no transcript for {} in the manifest", f.id)))?;
                    Ok(AsrExample { id: f.id, features: f.features, transcript: transcript.to_string() })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((examples, index.feature_rate))
        }
        (None, true) => {
            let mel = MelConfig::default();
            let feats = parallel::map(&manifest.entries, |e| log_mel(&read_wav(&e.path)?, &mel));
            let examples = manifest
                .entries
                .iter()
                .zip(feats)
                .map(|(e, f)| Ok(AsrExample { id: e.id.clone(), features: f?, transcript: e.transcript.clone() }))
                .collect::<Result<Vec<_>>>()?;
            Ok((examples, 1000.0 / mel.hop_ms))
        }
        _ => Err(Error::Config("give exactly one of --index or --logmel".into())),
    }
}

pub fn train_asr_cmd(args: &TrainAsrArgs) -> Result<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(steps) = args.steps {
        cfg.set("asr.steps", &steps.to_string())?;
    }
    let manifest = Manifest::load(&args.manifest)?;
    let (mut examples, detected_rate) = load_inputs(args.index.as_deref(), args.logmel, &manifest)?;
    let rate = args.rate.unwrap_or(detected_rate);
    let transform = match &args.pca_model {
        Some(p) => Some(InputTransform::from_pca(&PcaFile::read(p)?)),
        None => None,
    };
    if let Some(t) = &transform {
        for ex in &mut examples {
            ex.features = t.apply(&ex.features)?;
        }
    }
    let input_dim = examples.first().map(|e| e.features.cols()).ok_or_else(|| Error::Config("no training utterances".into()))?;
    let vocab = cfg.vocabulary();
    let asr_cfg = cfg.asr_config(input_dim, rate)?;
    let mut unalignable = 0;
    for ex in &examples {
        if asr_cfg.output_frames(ex.features.rows()) < min_frames(&vocab.encode(&ex.transcript)?).max(1) {
            unalignable += 1;
        }
    }
    if 2 * unalignable > examples.len() {
        return Err(Error::Contract(format!(
            "{unalignable} of {} utterances cannot be aligned at {rate} Hz",
            examples.len()
        )));
    }
    let started = unix_time();
    let (model, log) = train_asr(&examples, &vocab, &asr_cfg, &cfg.asr_options(args.seed))?;
    let mut params = model.params;
    if let Some(t) = &transform {
        t.store(&mut params);
    }
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "asr".into());
    meta.insert("seed".into(), args.seed.to_string());
    meta.insert("step".into(), log.records.len().to_string());
    meta.insert("asr.input_dim".into(), input_dim.to_string());
    meta.insert("asr.feature_rate".into(), rate.to_string());
    meta.insert("asr.input".into(), if args.logmel { "logmel" } else { "features" }.into());
    snapshot(&cfg, &mut meta);
    Checkpoint { metadata: meta, params }.write(&args.out)?;
    let notes = vec![format!("skipped\t{}", log.skipped.len())];
    let log_path = write_log(&args.out, &[], &log.records, &notes, started, !args.no_timestamps)?;
    let last = log.records.last().map_or(f32::NAN, |r| r.loss);
    Ok(format!(
        "checkpoint\t{}\nlog\t{}\nskipped\t{}\nfinal_loss\t{last:.6}\n",
        args.out.display(),
        log_path.display(),
        log.skipped.len()
    ))
}

/// ASR model, vocabulary and optional input transform from a checkpoint.
fn load_asr(path: &Path) -> Result<(AsrModel, Vocabulary, Option<InputTransform>, String)> {
    let mut ckpt = Checkpoint::read(path)?;
    if ckpt.meta("kind")? != "asr" {
        return Err(Error::Contract(format!("{} is not an ASR checkpoint", path.display())));
    }
    let cfg = restore_config(&ckpt)?;
    let input_dim: usize = parse_meta(&ckpt, "asr.input_dim")?;
    let rate: f64 = parse_meta(&ckpt, "asr.feature_rate")?;
    let input = ckpt.meta("asr.input")?.to_string();
    let transform = InputTransform::from_params(&ckpt.params);
    ckpt.params.remove(INPUT_MEAN);
    ckpt.params.remove(INPUT_ROTATION);
    let model = AsrModel::from_params(&cfg.asr_config(input_dim, rate)?, ckpt.params)?;
    Ok((model, cfg.vocabulary(), transform, input))
}

pub fn eval(args: &EvalArgs) -> Result<String> {
    let (model, vocab, transform, input) = load_asr(&args.checkpoint)?;
    if (input == "logmel") != args.logmel {
        return Err(Error::Contract(format!("checkpoint was trained on {input} inputs")));
    }
    let manifest = Manifest::load(&args.manifest)?;
    let (mut examples, _) = load_inputs(args.index.as_deref(), args.logmel, &manifest)?;
    for ex in &mut examples {
        vocab
            .encode(&ex.transcript)
            .map_err(|e| Error::Contract(format!("reference {} does not fit the checkpoint vocabulary: {e}", ex.id)))?;
        if let Some(t) = &transform {
            ex.features = t.apply(&ex.features)?;
        }
    }
    let report = evaluate(&model, &vocab, &examples)?;
    let text = report.render();
    if let Some(out) = &args.out {
        std::fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    }
    Ok(text)
}
