//! Logit datasets grouped by domain, with on-disk CSV + manifest form.
//!
//! A dataset directory holds `manifest.json` plus one CSV per domain with
//! header `label,logit_0..logit_{J-1},emb_0..emb_{p-1}[,oracle_conf]`. Floats
//! are written in scientific notation with 17 significant digits, so values
//! round-trip exactly. Lines end with LF and fields are never quoted.
//!
//! Calibration/evaluation splits shuffle each domain with a single
//! `rand_chacha::ChaCha8Rng` stream seeded via `seed_from_u64`, visiting
//! domains in manifest order; the calibration half takes ceil(n/2) samples.

use crate::error::{Error, Result};
use crate::fileio::atomic_write;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

/// Whether a domain participated in calibration (in-distribution) or is
/// held out entirely (out-of-distribution).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Ind,
    Ood,
}

/// Samples from a single domain: labels, raw logits and feature embeddings,
/// plus optional oracle confidences for synthetic data.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    id: String,
    split: Split,
    num_classes: usize,
    embedding_dim: usize,
    labels: Vec<usize>,
    logits: Vec<f64>,     // row-major n x num_classes
    embeddings: Vec<f64>, // row-major n x embedding_dim
    oracle_conf: Option<Vec<f64>>,
}

impl DomainDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        split: Split,
        num_classes: usize,
        embedding_dim: usize,
        labels: Vec<usize>,
        logits: Vec<f64>,
        embeddings: Vec<f64>,
        oracle_conf: Option<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if num_classes == 0 {
            return Err(Error::InvalidData(format!("domain {id}: num_classes is 0")));
        }
        if logits.len() != n * num_classes {
            return Err(Error::DimensionMismatch(format!(
                "domain {id}: {} logits for {n} samples x {num_classes} classes",
                logits.len()
            )));
        }
        if embeddings.len() != n * embedding_dim {
            return Err(Error::DimensionMismatch(format!(
                "domain {id}: {} embedding values for {n} samples x dim {embedding_dim}",
                embeddings.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidData(format!(
                "domain {id}: label {bad} outside [0, {num_classes})"
            )));
        }
        if !logits.iter().chain(embeddings.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "domain {id}: non-finite logit or embedding"
            )));
        }
        if let Some(oc) = &oracle_conf {
            if oc.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "domain {id}: {} oracle confidences for {n} samples",
                    oc.len()
                )));
            }
            let lo = 1.0 / num_classes as f64;
            if let Some(bad) = oc.iter().find(|v| !(v.is_finite() && **v >= lo && **v <= 1.0)) {
                return Err(Error::InvalidData(format!(
                    "domain {id}: oracle confidence {bad} outside [{lo}, 1]"
                )));
            }
        }
        Ok(Self {
            id,
            split,
            num_classes,
            embedding_dim,
            labels,
            logits,
            embeddings,
            oracle_conf,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn embedding_row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.embedding_dim..(i + 1) * self.embedding_dim]
    }

    pub fn oracle_conf(&self) -> Option<&[f64]> {
        self.oracle_conf.as_deref()
    }

    /// New dataset keeping only the given sample indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut labels = Vec::with_capacity(indices.len());
        let mut logits = Vec::with_capacity(indices.len() * self.num_classes);
        let mut embeddings = Vec::with_capacity(indices.len() * self.embedding_dim);
        let mut oracle = self.oracle_conf.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidData(format!(
                    "subset index {i} out of range for domain {} with {} samples",
                    self.id,
                    self.len()
                )));
            }
            labels.push(self.labels[i]);
            logits.extend_from_slice(self.logits_row(i));
            embeddings.extend_from_slice(self.embedding_row(i));
            if let (Some(out), Some(oc)) = (oracle.as_mut(), &self.oracle_conf) {
                out.push(oc[i]);
            }
        }
        Self::new(
            self.id.clone(),
            self.split,
            self.num_classes,
            self.embedding_dim,
            labels,
            logits,
            embeddings,
            oracle,
        )
    }
}

/// An ordered collection of domains sharing class count and embedding width.
#[derive(Debug, Clone)]
pub struct MultiDomainDataset {
    num_classes: usize,
    embedding_dim: usize,
    domains: Vec<DomainDataset>,
}

/// Calibration/evaluation halves produced by [`MultiDomainDataset::split_half`].
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub calibration: MultiDomainDataset,
    pub evaluation: MultiDomainDataset,
}

impl MultiDomainDataset {
    pub fn new(domains: Vec<DomainDataset>) -> Result<Self> {
        let first = domains.first().ok_or(Error::EmptyDataset)?;
        let num_classes = first.num_classes;
        let embedding_dim = first.embedding_dim;
        for d in &domains {
            if d.num_classes != num_classes || d.embedding_dim != embedding_dim {
                return Err(Error::DimensionMismatch(format!(
                    "domain {}: shape ({}, {}) differs from ({num_classes}, {embedding_dim})",
                    d.id, d.num_classes, d.embedding_dim
                )));
            }
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].iter().any(|other| other.id == d.id) {
                return Err(Error::InvalidData(format!("duplicate domain id {}", d.id)));
            }
        }
        Ok(Self {
            num_classes,
            embedding_dim,
            domains,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn domains(&self) -> &[DomainDataset] {
        &self.domains
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, id: &str) -> Option<&DomainDataset> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(|d| d.len()).sum()
    }

    /// Keep only domains with the given split tag.
    pub fn filter_split(&self, split: Split) -> Result<Self> {
        let kept: Vec<DomainDataset> = self
            .domains
            .iter()
            .filter(|d| d.split == split)
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidData(format!("no {split:?} domains in dataset")));
        }
        Self::new(kept)
    }

    /// Per-domain random half split; calibration takes ceil(n/2) samples.
    /// Both halves keep the original within-domain sample order.
    pub fn split_half(&self, seed: u64) -> Result<SplitResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cal = Vec::with_capacity(self.domains.len());
        let mut eval = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            if d.len() < 2 {
                return Err(Error::DomainTooSmall {
                    id: d.id.clone(),
                    n: d.len(),
                    min: 2,
                });
            }
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.shuffle(&mut rng);
            let n_cal = d.len().div_ceil(2);
            let mut cal_idx = idx[..n_cal].to_vec();
            let mut eval_idx = idx[n_cal..].to_vec();
            cal_idx.sort_unstable();
            eval_idx.sort_unstable();
            cal.push(d.subset(&cal_idx)?);
            eval.push(d.subset(&eval_idx)?);
        }
        Ok(SplitResult {
            calibration: Self::new(cal)?,
            evaluation: Self::new(eval)?,
        })
    }

    /// Concatenate all domains, in order, into one dataset with id "pooled".
    /// Oracle confidences survive only if every domain carries them. The
    /// pooled split tag is Ind unless every input domain is Ood.
    pub fn pool(&self) -> Result<DomainDataset> {
        let n = self.total_samples();
        let mut labels = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n * self.num_classes);
        let mut embeddings = Vec::with_capacity(n * self.embedding_dim);
        let all_oracle = self.domains.iter().all(|d| d.oracle_conf.is_some());
        let mut oracle = all_oracle.then(|| Vec::with_capacity(n));
        for d in &self.domains {
            labels.extend_from_slice(&d.labels);
            logits.extend_from_slice(&d.logits);
            embeddings.extend_from_slice(&d.embeddings);
            if let (Some(out), Some(oc)) = (oracle.as_mut(), &d.oracle_conf) {
                out.extend_from_slice(oc);
            }
        }
        let split = if self.domains.iter().all(|d| d.split == Split::Ood) {
            Split::Ood
        } else {
            Split::Ind
        };
        DomainDataset::new(
            "pooled",
            split,
            self.num_classes,
            self.embedding_dim,
            labels,
            logits,
            embeddings,
            oracle,
        )
    }

    /// Load a dataset directory written by [`MultiDomainDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(|source| Error::MissingFile {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&raw).map_err(|e| Error::SchemaViolation {
                path: manifest_path.clone(),
                row: e.line(),
                detail: e.to_string(),
            })?;
        if manifest.version != 1 {
            return Err(Error::SchemaViolation {
                path: manifest_path.clone(),
                row: 1,
                detail: format!("unsupported manifest version {}", manifest.version),
            });
        }
        let mut domains = Vec::with_capacity(manifest.domains.len());
        for entry in &manifest.domains {
            domains.push(load_domain_csv(
                &dir.join(&entry.file),
                entry,
                manifest.num_classes,
                manifest.embedding_dim,
            )?);
        }
        if domains.is_empty() {
            return Err(Error::SchemaViolation {
                path: manifest_path,
                row: 1,
                detail: "manifest lists no domains".into(),
            });
        }
        Self::new(domains)
    }

    /// Write `manifest.json` plus one CSV per domain into `dir`.
    ///
    /// Each file is written atomically, the manifest last, so a manifest
    /// that exists always references complete domain files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::IoFailure {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            let file = format!("{}.csv", sanitize_file_stem(&d.id));
            atomic_write(&dir.join(&file), domain_csv(d).as_bytes())?;
            entries.push(ManifestEntry {
                id: d.id.clone(),
                file,
                split: d.split,
                n: d.len(),
            });
        }
        let manifest = Manifest {
            version: 1,
            num_classes: self.num_classes,
            embedding_dim: self.embedding_dim,
            domains: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        atomic_write(&dir.join("manifest.json"), json.as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    num_classes: usize,
    embedding_dim: usize,
    domains: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    file: String,
    split: Split,
    n: usize,
}

fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn expected_header(num_classes: usize, embedding_dim: usize, oracle: bool) -> String {
    let mut h = String::from("label");
    for j in 0..num_classes {
        let _ = write!(h, ",logit_{j}");
    }
    for j in 0..embedding_dim {
        let _ = write!(h, ",emb_{j}");
    }
    if oracle {
        h.push_str(",oracle_conf");
    }
    h
}

fn domain_csv(d: &DomainDataset) -> String {
    let mut out = expected_header(d.num_classes, d.embedding_dim, d.oracle_conf.is_some());
    out.push('\n');
    for i in 0..d.len() {
        let _ = write!(out, "{}", d.labels[i]);
        for v in d.logits_row(i) {
            let _ = write!(out, ",{v:.16e}");
        }
        for v in d.embedding_row(i) {
            let _ = write!(out, ",{v:.16e}");
        }
        if let Some(oc) = &d.oracle_conf {
            let _ = write!(out, ",{:.16e}", oc[i]);
        }
        out.push('\n');
    }
    out
}

fn load_domain_csv(
    path: &Path,
    entry: &ManifestEntry,
    num_classes: usize,
    embedding_dim: usize,
) -> Result<DomainDataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::MissingFile {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let schema_err = |row: usize, detail: String| Error::SchemaViolation {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let read_line = |line: Option<std::io::Result<String>>| match line {
        Some(Ok(mut l)) => {
            if l.ends_with('\r') {
                l.pop();
            }
            Ok(Some(l))
        }
        Some(Err(e)) => Err(Error::MissingFile {
            path: path.to_path_buf(),
            source: e,
        }),
        None => Ok(None),
    };

    let header = read_line(lines.next())?.ok_or_else(|| schema_err(1, "empty file".into()))?;
    let has_oracle = if header == expected_header(num_classes, embedding_dim, false) {
        false
    } else if header == expected_header(num_classes, embedding_dim, true) {
        true
    } else {
        return Err(schema_err(
            1,
            format!(
                "header does not match {} classes / embedding dim {}",
                num_classes, embedding_dim
            ),
        ));
    };
    let fields_per_row = 1 + num_classes + embedding_dim + has_oracle as usize;

    let mut labels = Vec::with_capacity(entry.n);
    let mut logits = Vec::with_capacity(entry.n * num_classes);
    let mut embeddings = Vec::with_capacity(entry.n * embedding_dim);
    let mut oracle = has_oracle.then(|| Vec::with_capacity(entry.n));
    let mut row = 1;
    while let Some(line) = read_line(lines.next())? {
        row += 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let count = line.split(',').count();
        if count != fields_per_row {
            return Err(schema_err(
                row,
                format!("expected {fields_per_row} fields, found {count}"),
            ));
        }
        let label_tok = fields.next().expect("count checked");
        let label: i64 = label_tok
            .parse()
            .map_err(|_| schema_err(row, format!("label {label_tok:?} is not an integer")))?;
        if label < 0 || label as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                row,
                label,
                num_classes,
            });
        }
        labels.push(label as usize);
        let parse_float = |tok: &str, field: &str| -> Result<f64> {
            let v: f64 = tok
                .parse()
                .map_err(|_| schema_err(row, format!("{field}: {tok:?} is not a number")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    row,
                    field: field.to_string(),
                });
            }
            Ok(v)
        };
        for j in 0..num_classes {
            logits.push(parse_float(fields.next().expect("count checked"), &format!("logit_{j}"))?);
        }
        for j in 0..embedding_dim {
            embeddings
                .push(parse_float(fields.next().expect("count checked"), &format!("emb_{j}"))?);
        }
        if let Some(out) = oracle.as_mut() {
            let v = parse_float(fields.next().expect("count checked"), "oracle_conf")?;
            if !(v >= 1.0 / num_classes as f64 && v <= 1.0) {
                return Err(schema_err(
                    row,
                    format!("oracle_conf {v} outside [1/{num_classes}, 1]"),
                ));
            }
            out.push(v);
        }
    }
    if labels.len() != entry.n {
        return Err(schema_err(
            row + 1,
            format!("manifest declares {} rows, file has {}", entry.n, labels.len()),
        ));
    }
    DomainDataset::new(
        entry.id.clone(),
        entry.split,
        num_classes,
        embedding_dim,
        labels,
        logits,
        embeddings,
        oracle,
    )
    .map_err(|e| schema_err(1, e.to_string()))
}
