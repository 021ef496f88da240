//! Flat `key = value` run configuration validated against a key registry.

use std::collections::BTreeMap;
use std::path::Path;

use crate::asr::{AsrConfig, Vocabulary};
use crate::cpc::{ContextMode, CpcConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::masked::{MaskSpec, MaskedConfig, QuantizerConfig};
use crate::train::TrainOptions;

type Check = fn(&str) -> std::result::Result<(), String>;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    check: Check,
}

fn positive_int(v: &str) -> std::result::Result<(), String> {
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(()),
        _ => Err("expected a positive integer".into()),
    }
}

fn int(v: &str) -> std::result::Result<(), String> {
    v.parse::<usize>().map(|_| ()).map_err(|_| "expected a non-negative integer".into())
}

fn positive_float(v: &str) -> std::result::Result<(), String> {
    match v.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(()),
        _ => Err("expected a positive number".into()),
    }
}

fn non_negative_float(v: &str) -> std::result::Result<(), String> {
    match v.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.is_finite() => Ok(()),
        _ => Err("expected a non-negative number".into()),
    }
}

fn unit_interval(v: &str) -> std::result::Result<(), String> {
    match v.parse::<f64>() {
        Ok(x) if (0.0..=1.0).contains(&x) => Ok(()),
        _ => Err("expected a number in [0, 1]".into()),
    }
}

fn open_unit_interval(v: &str) -> std::result::Result<(), String> {
    match v.parse::<f64>() {
        Ok(x) if x > 0.0 && x <= 1.0 => Ok(()),
        _ => Err("expected a number in (0, 1]".into()),
    }
}

fn boolean(v: &str) -> std::result::Result<(), String> {
    match v {
        "true" | "false" => Ok(()),
        _ => Err("expected true or false".into()),
    }
}

fn int_list(v: &str) -> std::result::Result<(), String> {
    let items = parse_list(v).ok_or("expected a comma-separated list of positive integers")?;
    if items.is_empty() || items.contains(&0) {
        return Err("expected a non-empty list of positive integers".into());
    }
    Ok(())
}

fn context_mode(v: &str) -> std::result::Result<(), String> {
    ContextMode::parse(v).map(|_| ()).map_err(|e| e.to_string())
}

fn asr_strides(v: &str) -> std::result::Result<(), String> {
    match v {
        "auto" | "2,1,1" | "1,1,1" => Ok(()),
        _ => Err("expected auto, 2,1,1 or 1,1,1".into()),
    }
}

fn vocabulary(v: &str) -> std::result::Result<(), String> {
    parse_vocabulary(v).map(|_| ()).map_err(|e| e.to_string())
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    v.split(',').map(|s| s.trim().parse::<usize>().ok()).collect()
}

fn parse_vocabulary(v: &str) -> Result<Vocabulary> {
    if v == "characters" {
        return Ok(Vocabulary::characters());
    }
    match v.strip_prefix("synthetic:").and_then(|n| n.parse::<usize>().ok()) {
        Some(n) => Vocabulary::synthetic(n),
        None => Err(Error::Config(format!("unknown vocabulary {v:?} (characters or synthetic:N)"))),
    }
}

macro_rules! key {
    ($key:literal, $default:literal, $check:expr, $doc:literal) => {
        KeySpec { key: $key, default: $default, doc: $doc, check: $check }
    };
}

/// Every accepted key with its default and validator.
pub static REGISTRY: &[KeySpec] = &[
    key!("encoder.filters", "16,32,48,64,128,128", int_list, "conv filters per encoder layer"),
    key!("encoder.kernels", "10,8,4,4,4,1", int_list, "conv kernel size per encoder layer"),
    key!("encoder.strides", "5,4,2,2,2,1", int_list, "conv stride per encoder layer"),
    key!("encoder.groups", "16", positive_int, "group-norm groups (must divide every filter count)"),
    key!("encoder.relu_cap", "5", positive_float, "clipping value of the encoder ReLU"),
    key!("encoder.masked_extra_stride", "2", positive_int, "stride of the extra layer the masked objective appends (1 = none)"),
    key!("context.mode", "uni", context_mode, "cpc context networks: uni, uni2x or bi"),
    key!("context.layers", "2", positive_int, "LSTM layers per cpc context network"),
    key!("context.units", "128", positive_int, "LSTM units per cpc context network"),
    key!("context.blocks", "2", positive_int, "self-attention blocks of the masked context network"),
    key!("context.heads", "4", positive_int, "attention heads of the masked context network"),
    key!("context.ffn_dim", "256", positive_int, "feed-forward width of the masked context network"),
    key!("loss.offsets", "4", positive_int, "cpc prediction offsets K"),
    key!("loss.distractors", "4", positive_int, "cpc distractors per prediction"),
    key!("loss.negative_weight", "1", non_negative_float, "cpc weight of the distractor terms"),
    key!("loss.mask_prob", "0.065", unit_interval, "masked: span start probability"),
    key!("loss.mask_span", "10", positive_int, "masked: span length"),
    key!("loss.codebook_groups", "2", positive_int, "masked: quantizer groups G"),
    key!("loss.codebook_entries", "32", positive_int, "masked: entries per group V"),
    key!("loss.codeword_dim", "64", positive_int, "masked: codeword width per group"),
    key!("loss.masked_distractors", "10", positive_int, "masked: distractors per masked step"),
    key!("loss.kappa", "0.1", positive_float, "masked: cosine-similarity temperature"),
    key!("loss.diversity_weight", "0.1", non_negative_float, "masked: diversity loss weight"),
    key!("loss.tau_start", "2", positive_float, "masked: initial Gumbel temperature"),
    key!("loss.tau_end", "0.5", positive_float, "masked: final Gumbel temperature"),
    key!("loss.tau_decay", "0.995", open_unit_interval, "masked: per-step temperature decay"),
    key!("train.steps", "500", int, "pretraining updates"),
    key!("train.batch_seconds", "4", positive_float, "pretraining audio per batch (s)"),
    key!("train.lr_high", "0.0003", positive_float, "pretraining learning rate, first phase"),
    key!("train.lr_low", "0.00005", positive_float, "pretraining learning rate, second phase"),
    key!("train.switch_fraction", "0.5", unit_interval, "fraction of updates before the learning-rate switch"),
    key!("asr.conv_units", "64,48,32", int_list, "units of the three ASR convolutions"),
    key!("asr.strides", "auto", asr_strides, "ASR conv strides; auto picks by feature rate"),
    key!("asr.rnn_layers", "2", positive_int, "bidirectional LSTM layers"),
    key!("asr.rnn_units", "64", positive_int, "units per LSTM direction"),
    key!("asr.vocabulary", "synthetic:5", vocabulary, "characters or synthetic:N"),
    key!("asr.steps", "500", int, "ASR updates"),
    key!("asr.batch_seconds", "320", positive_float, "ASR audio per batch (s)"),
    key!("asr.lr_high", "0.001", positive_float, "ASR learning rate, first phase"),
    key!("asr.lr_low", "0.0003", positive_float, "ASR learning rate, second phase"),
    key!("pca.threshold", "0.95", open_unit_interval, "explained-variance threshold for linear dimensionality"),
    key!("pca.whiten", "false", boolean, "scale PCA outputs to unit variance"),
    key!("pca.mean_only", "false", boolean, "replace PCA by mean normalization"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|s| s.key == key)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: REGISTRY.iter().map(|s| (s.key.to_string(), s.default.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), n + 1) {
                return Err(Error::Config(format!("line {}: {key} already set on line {prev}", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.check_consistency()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        (spec.check)(value).map_err(|m| Error::Config(format!("{key}: {m} (got {value:?})")))?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a registered key"))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Registry-ordered listing with one comment line per key; parses back
    /// to the same configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in REGISTRY {
            out.push_str(&format!("# {} (default {})\n{} = {}\n", s.doc, s.default, s.key, self.get(s.key)));
        }
        out
    }

    fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    fn f32(&self, key: &str) -> f32 {
        self.f64(key) as f32
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn float(&self, key: &str) -> f64 {
        self.f64(key)
    }

    fn list(&self, key: &str) -> Vec<usize> {
        parse_list(self.get(key)).expect("validated on set")
    }

    /// Cross-key checks that single-key validators cannot express.
    pub fn check_consistency(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.list("asr.conv_units").len() != 3 {
            return Err(Error::Config("asr.conv_units needs exactly three values".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            filters: self.list("encoder.filters"),
            kernels: self.list("encoder.kernels"),
            strides: self.list("encoder.strides"),
            groups: self.usize("encoder.groups"),
            relu_cap: self.f32("encoder.relu_cap"),
        }
    }

    pub fn context_mode(&self) -> ContextMode {
        ContextMode::parse(self.get("context.mode")).expect("validated on set")
    }

    pub fn cpc_config(&self) -> Result<CpcConfig> {
        let cfg = CpcConfig {
            encoder: self.encoder_config(),
            context_layers: self.usize("context.layers"),
            context_units: self.usize("context.units"),
            offsets: self.usize("loss.offsets"),
            distractors: self.usize("loss.distractors"),
            mode: self.context_mode(),
            negative_weight: self.f32("loss.negative_weight"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn masked_config(&self) -> Result<MaskedConfig> {
        let mut encoder = self.encoder_config();
        let extra = self.usize("encoder.masked_extra_stride");
        if extra > 1 {
            encoder = encoder.with_extra_stride(extra, extra);
        }
        let cfg = MaskedConfig {
            encoder,
            context_blocks: self.usize("context.blocks"),
            heads: self.usize("context.heads"),
            ffn_dim: self.usize("context.ffn_dim"),
            mask: MaskSpec { start_probability: self.f64("loss.mask_prob"), span: self.usize("loss.mask_span") },
            quantizer: QuantizerConfig {
                groups: self.usize("loss.codebook_groups"),
                entries: self.usize("loss.codebook_entries"),
                codeword_dim: self.usize("loss.codeword_dim"),
            },
            distractors: self.usize("loss.masked_distractors"),
            kappa: self.f32("loss.kappa"),
            diversity_weight: self.f32("loss.diversity_weight"),
            tau_start: self.f32("loss.tau_start"),
            tau_end: self.f32("loss.tau_end"),
            tau_decay: self.f32("loss.tau_decay"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        parse_vocabulary(self.get("asr.vocabulary")).expect("validated on set")
    }

    pub fn asr_config(&self, input_dim: usize, feature_rate: f64) -> Result<AsrConfig> {
        let strides = match self.get("asr.strides") {
            "auto" => AsrConfig::strides_for_rate(feature_rate),
            s => parse_list(s).expect("validated on set"),
        };
        let cfg = AsrConfig {
            input_dim,
            conv_units: self.list("asr.conv_units"),
            strides,
            rnn_layers: self.usize("asr.rnn_layers"),
            rnn_units: self.usize("asr.rnn_units"),
            vocab_size: self.vocabulary().len(),
            feature_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            steps: self.usize("train.steps"),
            seed,
            batch_seconds: self.f64("train.batch_seconds"),
            lr_high: self.f32("train.lr_high"),
            lr_low: self.f32("train.lr_low"),
            switch_fraction: self.f64("train.switch_fraction"),
        }
    }

    pub fn asr_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            steps: self.usize("asr.steps"),
            seed,
            batch_seconds: self.f64("asr.batch_seconds"),
            lr_high: self.f32("asr.lr_high"),
            lr_low: self.f32("asr.lr_low"),
            switch_fraction: self.f64("train.switch_fraction"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.cpc_config().unwrap(), CpcConfig::desk());
        assert_eq!(cfg.masked_config().unwrap(), MaskedConfig::desk());
        assert_eq!(cfg.asr_config(256, 100.0).unwrap(), AsrConfig::desk(256, 6, 100.0));
    }

    #[test]
    fn registry_keys_are_unique_and_sectioned() {
        for (i, s) in REGISTRY.iter().enumerate() {
            assert!(REGISTRY[i + 1..].iter().all(|t| t.key != s.key), "{}", s.key);
            let section = s.key.split('.').next().unwrap();
            assert!(["encoder", "context", "loss", "asr", "pca", "train"].contains(&section));
            assert!((s.check)(s.default).is_ok(), "{}", s.key);
        }
    }
}
