//! Class-labelled feature vectors and their on-disk formats.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "AFRF"            4 bytes magic
//! version: u32      currently 1
//! dim: u32
//! count: u64
//! count × record:
//!     name_len: u16
//!     name: name_len bytes of UTF-8
//!     dim × f32
//! ```
//!
//! Features are `f64` in memory and `f32` on disk, so a store whose values
//! are `f32`-representable round-trips bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{AfrError, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"AFRF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub class_name: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    records: Vec<FeatureRecord>,
    index: BTreeMap<String, Vec<usize>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(AfrError::config("feature dim must be >= 1"));
        }
        Ok(Self {
            dim,
            records: Vec::new(),
            index: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, class_name: impl Into<String>, feature: Vec<f64>) -> Result<()> {
        let class_name = class_name.into();
        if class_name.is_empty() {
            return Err(AfrError::data("empty class name"));
        }
        if feature.len() != self.dim {
            return Err(AfrError::data(format!(
                "feature for `{class_name}` has length {}, expected {}",
                feature.len(),
                self.dim
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(AfrError::data(format!(
                "non-finite feature for `{class_name}`"
            )));
        }
        self.index
            .entry(class_name.clone())
            .or_default()
            .push(self.records.len());
        self.records.push(FeatureRecord {
            class_name,
            feature,
        });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn feature(&self, record: usize) -> &[f64] {
        &self.records[record].feature
    }

    /// Distinct class names, ascending.
    pub fn class_names(&self) -> Vec<&str> {
        self.index.keys().map(String::as_str).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.index.len()
    }

    pub fn contains_class(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Record positions of a class, in insertion order.
    pub fn indices_of(&self, class_name: &str) -> Result<&[usize]> {
        self.index
            .get(class_name)
            .map(Vec::as_slice)
            .ok_or_else(|| AfrError::data(format!("class `{class_name}` has no features")))
    }

    /// All features of one class stacked as rows.
    pub fn class_matrix(&self, class_name: &str) -> Result<Matrix> {
        let idx = self.indices_of(class_name)?;
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.feature(i)).collect();
        Matrix::from_rows(&rows)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(
            HEADER_LEN as usize + self.records.len() * (2 + 16 + 4 * self.dim),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let dim = u32::try_from(self.dim)
            .map_err(|_| AfrError::data(format!("dim {} exceeds u32", self.dim)))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            let name = rec.class_name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| {
                AfrError::data(format!("class name `{}` longer than 65535 bytes", rec.class_name))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            for &v in &rec.feature {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(AfrError::data(format!(
                        "feature value {v} of `{}` overflows f32",
                        rec.class_name
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(4, "magic")?;
        if magic != MAGIC {
            return Err(AfrError::format(0, format!("bad magic {magic:?}")));
        }
        let version = rd.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(AfrError::format(4, format!("unsupported version {version}")));
        }
        let dim = rd.u32("dim")? as usize;
        if dim == 0 {
            return Err(AfrError::format(8, "dim must be >= 1"));
        }
        let count = rd.u64("record count")?;
        let mut store = FeatureStore::new(dim)?;
        for i in 0..count {
            let rec_start = rd.pos as u64;
            let name_len = rd.u16(&format!("name length of record {i}"))? as usize;
            if name_len == 0 {
                return Err(AfrError::format(rec_start, format!("record {i} has empty class name")));
            }
            let name_at = rd.pos as u64;
            let name = std::str::from_utf8(rd.take(name_len, &format!("name of record {i}"))?)
                .map_err(|e| AfrError::format(name_at, format!("record {i} name is not UTF-8: {e}")))?
                .to_string();
            let feat_at = rd.pos as u64;
            let raw = rd.take(4 * dim, &format!("features of record {i}"))?;
            let mut feature = Vec::with_capacity(dim);
            for (j, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
                if !v.is_finite() {
                    return Err(AfrError::format(
                        feat_at + 4 * j as u64,
                        format!("non-finite value in record {i}"),
                    ));
                }
                feature.push(v as f64);
            }
            store.push(name, feature)?;
        }
        if rd.pos != bytes.len() {
            return Err(AfrError::format(
                rd.pos as u64,
                format!("{} trailing bytes after {count} records", bytes.len() - rd.pos),
            ));
        }
        Ok(store)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut store: Option<FeatureStore> = None;
        for row in reader.records() {
            let row = row.map_err(|e| {
                let off = e.position().map(|p| p.byte()).unwrap_or(0);
                AfrError::format(off, format!("csv: {e}"))
            })?;
            let offset = row.position().map(|p| p.byte()).unwrap_or(0);
            if row.len() < 2 {
                return Err(AfrError::format(offset, "csv row needs a class and >= 1 value"));
            }
            let mut values = Vec::with_capacity(row.len() - 1);
            for field in row.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| AfrError::format(offset, format!("csv value `{field}` is not a number")))?;
                values.push(v);
            }
            let st = match store.as_mut() {
                Some(s) => s,
                None => store.insert(FeatureStore::new(values.len())?),
            };
            if values.len() != st.dim {
                return Err(AfrError::format(
                    offset,
                    format!("csv row has {} values, expected {}", values.len(), st.dim),
                ));
            }
            st.push(&row[0], values)
                .map_err(|e| AfrError::format(offset, e.to_string()))?;
        }
        store.ok_or_else(|| AfrError::format(0, "csv file has no records"))
    }

    /// CSV export. Class names are quoted when needed; surrounding
    /// whitespace in names does not survive the trimming reader.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        for rec in &self.records {
            let mut row = Vec::with_capacity(rec.feature.len() + 1);
            row.push(rec.class_name.clone());
            row.extend(rec.feature.iter().map(f64::to_string));
            w.write_record(&row).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 input")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(AfrError::format(
                self.pos as u64,
                format!("truncated: {what} needs {n} bytes, {available} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Loads a store; `.csv` files are parsed as CSV, anything else as AFRF.
pub fn load_feature_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    if is_csv(path) {
        FeatureStore::from_csv_str(&std::fs::read_to_string(path)?)
    } else {
        FeatureStore::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_feature_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        std::fs::write(path, store.to_csv_string())?;
    } else {
        std::fs::write(path, store.to_bytes()?)?;
    }
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}
