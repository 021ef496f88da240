//! Binary checkpoint, feature and PCA files plus the feature index.
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diagnostics::PcaModel;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{Param, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSPK";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"CSFT";
pub const FEATURE_VERSION: u16 = 1;
pub const PCA_MAGIC: &[u8; 4] = b"CSPC";
pub const PCA_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!("{} {field}", self.what), "truncated")),
        }
    }

    fn header(&mut self, magic: &[u8; 4], version: u16) -> Result<()> {
        if self.take(4, "magic")? != magic {
            return Err(Error::format(format!("{} magic", self.what), "wrong file type"));
        }
        let v = self.u16("version")?;
        if v != version {
            return Err(Error::format(format!("{} version", self.what), format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, len: usize, field: &str) -> Result<String> {
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(format!("{} {field}", self.what), "not UTF-8"))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(format!("{} {field}", self.what), "size overflow"))?;
        let raw = self.take(len, field)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format(format!("{} {field}", self.what), "size overflow"))?;
        let raw = self.take(len, field)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Named parameters plus a `key=value` metadata block (model kind, config
/// snapshot, step count, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Self { metadata: BTreeMap::new(), params }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Contract(format!("checkpoint metadata lacks {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Contract(format!("metadata entry {k:?} cannot be stored")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta_len = r.u32("metadata length")? as usize;
        let meta = r.string(meta_len, "metadata")?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint metadata", format!("bad line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = r.string(name_len, "tensor name")?;
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::format("checkpoint tensor shape", "size overflow"))?;
            let data = r.f32s(n, "tensor payload")?;
            params.insert(name, Param::new(shape, data)?);
        }
        r.finish()?;
        Ok(Self { metadata, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// One utterance's feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub id: String,
    pub features: FeatureMatrix,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let f = &self.features;
        let mut out = Vec::with_capacity(16 + self.id.len() + 4 * f.data().len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.id.as_bytes());
        out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "feature file");
        r.header(FEATURE_MAGIC, FEATURE_VERSION)?;
        let id_len = r.u16("id length")? as usize;
        let id = r.string(id_len, "id")?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let data = r.f32s(rows.saturating_mul(cols), "payload")?;
        r.finish()?;
        Ok(Self { id, features: FeatureMatrix::new(rows, cols, data)? })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// A fitted PCA model plus the transform options chosen when it was fitted.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaFile {
    pub model: PcaModel,
    pub whiten: bool,
}

impl PcaFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(PCA_MAGIC);
        out.extend_from_slice(&PCA_VERSION.to_le_bytes());
        out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
        out.push(u8::from(self.whiten));
        out.push(u8::from(m.degenerate));
        for v in m.mean.iter().chain(&m.components).chain(&m.explained_variance).chain(&m.explained_variance_ratio) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "PCA model");
        r.header(PCA_MAGIC, PCA_VERSION)?;
        let d = r.u32("dimension")? as usize;
        let whiten = r.u8("whiten flag")? != 0;
        let degenerate = r.u8("degenerate flag")? != 0;
        let mean = r.f64s(d, "mean")?;
        let components = r.f64s(d.saturating_mul(d), "components")?;
        let explained_variance = r.f64s(d, "explained variance")?;
        let explained_variance_ratio = r.f64s(d, "explained variance ratio")?;
        r.finish()?;
        let model = PcaModel { mean, components, explained_variance, explained_variance_ratio, degenerate };
        Ok(Self { model, whiten })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub path: PathBuf,
    pub rows: usize,
}

/// Extracted-feature listing: a `# feature_rate=<Hz>` header, then
/// `id<TAB>path<TAB>rows` lines with paths relative to the index file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureIndex {
    pub feature_rate: f64,
    pub entries: Vec<IndexEntry>,
}

const RATE_HEADER: &str = "# feature_rate=";

impl FeatureIndex {
    pub fn render(&self, base: &Path) -> String {
        let mut out = format!("{RATE_HEADER}{}\n", self.feature_rate);
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            out.push_str(&format!("{}\t{}\t{}\n", e.id, rel.display(), e.rows));
        }
        out
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut feature_rate = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if let Some(rate) = line.strip_prefix(RATE_HEADER) {
                feature_rate = Some(
                    rate.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|r| *r > 0.0)
                        .ok_or_else(|| Error::format("feature index header", format!("bad rate {rate:?}")))?,
                );
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let rows = fields.get(2).and_then(|r| r.parse::<usize>().ok());
            match (fields.len(), rows) {
                (3, Some(rows)) => {
                    let p = Path::new(fields[1]);
                    let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                    entries.push(IndexEntry { id: fields[0].to_string(), path, rows });
                }
                _ => return Err(Error::format("feature index", format!("line {}: expected id, path, rows", n + 1))),
            }
        }
        let feature_rate = feature_rate.ok_or_else(|| Error::format("feature index header", "missing feature rate"))?;
        Ok(Self { feature_rate, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.render(path.parent().unwrap_or(Path::new("."))).as_bytes())
    }

    /// Reads every feature file, checking ids and row counts against the index.
    pub fn load_features(&self) -> Result<Vec<FeatureFile>> {
        self.entries
            .iter()
            .map(|e| {
                let f = FeatureFile::read(&e.path)?;
                if f.id != e.id || f.features.rows() != e.rows {
                    return Err(Error::Contract(format!(
                        "{} does not match its index entry (id {}, {} rows)",
                        e.path.display(),
                        e.id,
                        e.rows
                    )));
                }
                Ok(f)
            })
            .collect()
    }
}
