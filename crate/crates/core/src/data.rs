//! Audio ingestion, log mel features, the synthetic corpus, manifests and
//! duration-budgeted batching.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{stream, Rng, Stream};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE, 16-bit PCM, mono byte stream.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("RIFF header", "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::format("fmt chunk", "truncated format chunk"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (encoding, channels, rate, bits) =
                    format.ok_or_else(|| Error::format("fmt chunk", "data chunk precedes format chunk"))?;
                if encoding != 1 {
                    return Err(Error::format("audio format", format!("encoding {encoding} is not PCM")));
                }
                if channels != 1 {
                    return Err(Error::format("channels", format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(Error::format("bits per sample", format!("{bits} bits, expected 16")));
                }
                if rate == 0 {
                    return Err(Error::format("sample rate", "zero sample rate"));
                }
                if body + size > bytes.len() {
                    return Err(Error::format(
                        "data chunk",
                        format!("declares {size} bytes but only {} remain", bytes.len() - body),
                    ));
                }
                if size % 2 != 0 {
                    return Err(Error::format("data chunk", "odd byte count for 16-bit samples"));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                return Ok(AudioBuffer { samples, sample_rate: rate });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::format("data chunk", "missing"))
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Format { field, message } => Error::Format {
            field,
            message: format!("{message} ({})", path.display()),
        },
        other => other,
    })
}

/// Serializes to 16-bit PCM mono; samples are clamped to the representable range.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &audio.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    fs::write(path, encode_wav(audio)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub num_filters: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { num_filters: 80, window_ms: 25.0, hop_ms: 10.0, fft_size: 512, floor: 1e-10 }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// `floor((T − window) / hop) + 1`, or zero when `T < window`.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> usize {
        let (win, hop) = (self.window_len(sample_rate), self.hop_len(sample_rate));
        if num_samples < win {
            0
        } else {
            (num_samples - win) / hop + 1
        }
    }

    /// Center frequency in Hz of every filter.
    pub fn center_frequencies(&self, sample_rate: u32) -> Vec<f64> {
        let edges = self.edges(sample_rate);
        edges[1..=self.num_filters].to_vec()
    }

    fn edges(&self, sample_rate: u32) -> Vec<f64> {
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        (0..self.num_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (self.num_filters + 1) as f64))
            .collect()
    }

    /// Triangular filters over the `fft_size / 2 + 1` bins, `[filters × bins]`.
    pub fn filterbank(&self, sample_rate: u32) -> Vec<Vec<f64>> {
        let bins = self.fft_size / 2 + 1;
        let edges = self.edges(sample_rate);
        let bin_hz = sample_rate as f64 / self.fft_size as f64;
        (0..self.num_filters)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        let (win, hop) = (self.window_len(sample_rate), self.hop_len(sample_rate));
        if self.num_filters == 0 || hop == 0 || hop > win || win > self.fft_size || !(self.floor > 0.0) {
            return Err(Error::Config(format!(
                "invalid mel configuration: {} filters, window {win}, hop {hop}, fft {}",
                self.num_filters, self.fft_size
            )));
        }
        Ok(())
    }
}

/// Log mel-filterbank magnitudes, one row per frame.
pub fn log_mel(audio: &AudioBuffer, cfg: &MelConfig) -> Result<FeatureMatrix> {
    cfg.validate(audio.sample_rate)?;
    let win = cfg.window_len(audio.sample_rate);
    let hop = cfg.hop_len(audio.sample_rate);
    let frames = cfg.num_frames(audio.samples.len(), audio.sample_rate);
    if frames == 0 {
        return Err(Error::InputTooShort { required: win, actual: audio.samples.len() });
    }
    let window: Vec<f64> = (0..win).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()).collect();
    let bank = cfg.filterbank(audio.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut mag = vec![0.0f64; bins];
    let mut out = Vec::with_capacity(frames * cfg.num_filters);
    for t in 0..frames {
        let frame = &audio.samples[t * hop..t * hop + win];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (&s, &w)) in frame.iter().zip(&window).enumerate() {
            buf[i].re = s as f64 * w;
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for filter in &bank {
            let e: f64 = filter.iter().zip(&mag).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.floor as f64).ln() as f32);
        }
    }
    FeatureMatrix::new(frames, cfg.num_filters, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub duration: f64,
    pub transcript: String,
}

/// Tab-separated `id  path  duration  transcript` lines. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let field = |name: &str| format!("manifest line {} {name}", lineno + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::format(field("columns"), format!("expected 4 fields, found {}", cols.len())));
            }
            let duration: f64 = cols[2]
                .parse()
                .map_err(|_| Error::format(field("duration"), format!("not a number: {:?}", cols[2])))?;
            if !(duration > 0.0) {
                return Err(Error::format(field("duration"), "must be positive"));
            }
            let path = Path::new(cols[1]);
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
                duration,
                transcript: cols[3].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes paths relative to `base` when possible.
    pub fn render(&self, base: &Path) -> String {
        self.entries
            .iter()
            .map(|e| {
                let p = e.path.strip_prefix(base).unwrap_or(&e.path);
                format!("{}\t{}\t{:.6}\t{}\n", e.id, p.display(), e.duration, e.transcript)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        fs::write(path, self.render(base)).map_err(|e| Error::io(path, e))
    }

    pub fn total_duration(&self) -> f64 {
        self.entries.iter().map(|e| e.duration).sum()
    }

    pub fn load_audio(&self) -> Result<Vec<AudioBuffer>> {
        self.entries.iter().map(|e| read_wav(&e.path)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Random-order greedy packing of item durations into batches whose totals
/// stay within `budget`. Every index appears in exactly one batch.
pub fn pack_durations(durations: &[f64], budget: f64, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if let Some((i, d)) = durations.iter().enumerate().find(|(_, &d)| d > budget) {
        return Err(Error::Config(format!(
            "utterance #{i} lasts {d:.3} s, longer than the {budget:.3} s batch budget"
        )));
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut total = 0.0;
    for i in order {
        if !current.is_empty() && total + durations[i] > budget {
            batches.push(std::mem::take(&mut current));
            total = 0.0;
        }
        current.push(i);
        total += durations[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// One epoch of manifest indices packed into duration-budgeted batches.
pub fn batch_by_duration(manifest: &Manifest, budget_seconds: f64, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let durations: Vec<f64> = manifest.entries.iter().map(|e| e.duration).collect();
    pack_durations(&durations, budget_seconds, rng).map_err(|e| match e {
        Error::Config(_) => {
            let (i, _) = durations.iter().enumerate().find(|(_, &d)| d > budget_seconds).expect("offender exists");
            let e = &manifest.entries[i];
            Error::Config(format!(
                "utterance {} lasts {:.3} s, longer than the {budget_seconds:.3} s batch budget",
                e.id, e.duration
            ))
        }
        other => other,
    })
}

pub const MAX_SYNTH_VOCAB: usize = 8;

/// Symbol written in transcripts for synthetic token `v`.
pub fn token_symbol(v: usize) -> char {
    (b'a' + v as u8) as char
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_utts: usize,
    pub tokens_per_utt: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > MAX_SYNTH_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary size {} outside 1..={MAX_SYNTH_VOCAB}",
                self.vocab_size
            )));
        }
        if self.tokens_per_utt == 0 {
            return Err(Error::Config("utterances need at least one token".into()));
        }
        Ok(())
    }
}

/// Nominal (unjittered) duration of token `v` in seconds, within 120–200 ms.
pub fn token_base_duration(v: usize) -> f64 {
    0.120 + 0.080 * v as f64 / (MAX_SYNTH_VOCAB - 1) as f64
}

/// Renders one token: a harmonic tone with a token-specific fundamental and
/// spectral peak, light noise and a smooth onset/offset.
pub fn token_waveform(v: usize, duration: f64, rng: &mut Rng) -> Vec<f32> {
    let n = (duration * SAMPLE_RATE as f64).round() as usize;
    let f0 = 110.0 * 1.22f64.powi(v as i32);
    let formant = 450.0 + 380.0 * v as f64;
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < 4000.0)
        .enumerate()
        .map(|(i, f)| (f, (-((f - formant) / 350.0).powi(2)).exp() + 0.25 / (i + 1) as f64))
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a)| a).sum();
    let ramp = (0.015 * SAMPLE_RATE as f64) as usize;
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let tone: f64 = harmonics.iter().map(|(f, a)| a * (2.0 * PI * f * t + phase).sin()).sum::<f64>() / norm;
            let edge = i.min(n - 1 - i);
            let env = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
            let noise: f64 = StandardNormal.sample(rng);
            (0.5 * env * tone + 0.01 * noise) as f32
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Sample range of each token.
    pub spans: Vec<(usize, usize)>,
    pub audio: AudioBuffer,
}

impl SynthUtterance {
    pub fn transcript(&self) -> String {
        self.tokens.iter().map(|&t| token_symbol(t).to_string()).collect::<Vec<_>>().join(" ")
    }
}

/// Deterministic in-memory corpus generation.
pub fn synth_utterances(cfg: &SynthConfig, id_prefix: &str) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Synth);
    let mut out = Vec::with_capacity(cfg.num_utts);
    for u in 0..cfg.num_utts {
        let mut samples = Vec::new();
        let mut tokens = Vec::with_capacity(cfg.tokens_per_utt);
        let mut spans = Vec::with_capacity(cfg.tokens_per_utt);
        for _ in 0..cfg.tokens_per_utt {
            let v = rng.random_range(0..cfg.vocab_size);
            let jitter: f64 = rng.random_range(0.9..=1.1);
            let wave = token_waveform(v, token_base_duration(v) * jitter, &mut rng);
            spans.push((samples.len(), samples.len() + wave.len()));
            samples.extend(wave);
            tokens.push(v);
        }
        out.push(SynthUtterance {
            id: format!("{id_prefix}{u:05}"),
            tokens,
            spans,
            audio: AudioBuffer { samples, sample_rate: SAMPLE_RATE },
        });
    }
    Ok(out)
}

/// Writes one WAV per utterance plus `manifest.tsv`-style entries into `out_dir`.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: &Path, id_prefix: &str) -> Result<Manifest> {
    let utts = synth_utterances(cfg, id_prefix)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let path = out_dir.join(format!("{}.wav", u.id));
        let bytes = encode_wav(&u.audio);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            transcript: u.transcript(),
            duration: u.audio.duration(),
            id: u.id,
            path,
        });
    }
    Ok(Manifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_bytes_round_trip() {
        let audio = AudioBuffer::new(vec![0.0, 0.5, -1.0, 32767.0 / 32768.0], 16000).unwrap();
        let bytes = encode_wav(&audio);
        let back = parse_wav(&bytes).unwrap();
        assert_eq!(back, audio);
        assert_eq!(encode_wav(&back), bytes);
    }

    #[test]
    fn mel_frame_count_formula() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.num_frames(400, 16000), 1);
        assert_eq!(cfg.num_frames(16000, 16000), 98);
        assert_eq!(cfg.num_frames(399, 16000), 0);
    }

    #[test]
    fn token_durations_stay_in_band() {
        assert!((token_base_duration(0) - 0.120).abs() < 1e-12);
        assert!((token_base_duration(MAX_SYNTH_VOCAB - 1) - 0.200).abs() < 1e-12);
    }
}
