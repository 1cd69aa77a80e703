//! Dataset manifests, embedding sidecars and filtered views of the image pool.
//!
//! A manifest is line-delimited: one header line
//!
//! ```text
//! #sip-manifest v1 task=<name> negatives=<label,...> positives=<label,...> embeddings=<path?>
//! ```
//!
//! followed by one JSON record per line with the fields `id`, `uri`, `label`,
//! `attributes`, `center` and `split`. Header values may contain spaces
//! (`negatives=No Finding`); a whitespace-separated token without `=` is
//! appended to the preceding value. Labels may not contain `,` or `=`.
//!
//! The embedding sidecar starts with `dim=<D> count=<N>` and continues with
//! `<id> <v1> ... <vD>` per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_MAGIC: &str = "#sip-manifest";
pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest header: {0}")]
    Header(String),
    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { found: String, expected: String },
    #[error("malformed record on line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {label:?} for record {id:?}")]
    UnknownLabel { id: String, label: String },
    #[error("label {0:?} declared as both positive and negative")]
    AmbiguousLabel(String),
    #[error("empty catalog")]
    Empty,
    #[error("embedding sidecar: {0}")]
    Embedding(String),
    #[error("embedding dimension mismatch for {id:?}: expected {expected}, found {found}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("cannot merge catalogs: {0}")]
    Merge(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CatalogError + '_ {
    move |source| CatalogError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Which side of the declared label partition a record sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Positive,
    /// Healthy controls; the only legal reference images.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    pub label: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub center: String,
    pub split: Split,
    /// Row in the attached [`EmbeddingTable`]; resolved at load time.
    #[serde(skip)]
    pub embedding_ref: Option<usize>,
}

impl ImageRecord {
    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }
}

/// Dense row-major table of embedding vectors keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self, CatalogError> {
        if dim == 0 {
            return Err(CatalogError::Embedding("dim must be positive".into()));
        }
        Ok(Self { dim, ids: Vec::new(), data: Vec::new(), index: HashMap::new() })
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self, CatalogError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut table = Self::new(dim)?;
        for (id, v) in rows {
            table.push(id.into(), &v)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, id: String, vector: &[f64]) -> Result<(), CatalogError> {
        if vector.len() != self.dim {
            return Err(CatalogError::DimensionMismatch { id, expected: self.dim, found: vector.len() });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(CatalogError::Embedding(format!("non-finite component for {id:?}")));
        }
        if self.index.contains_key(&id) {
            return Err(CatalogError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn read(path: &Path) -> Result<Self, CatalogError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| CatalogError::Embedding("missing header".into()))?
            .map_err(io_err(path))?;
        let mut dim = None;
        let mut count = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                _ => return Err(CatalogError::Embedding(format!("bad header token {tok:?}"))),
            }
        }
        let (dim, count) = match (dim, count) {
            (Some(d), Some(c)) => (d, c),
            _ => return Err(CatalogError::Embedding("header needs dim=<D> count=<N>".into())),
        };
        let mut table = Self::new(dim)?;
        for (n, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let id = toks.next().unwrap_or_default().to_string();
            let values = toks
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CatalogError::Embedding(format!("line {}: {e}", n + 2)))?;
            table.push(id, &values)?;
        }
        if table.len() != count {
            return Err(CatalogError::Embedding(format!("header count {count} but {} vectors", table.len())));
        }
        Ok(table)
    }

    /// Writes the sidecar with 17 significant digits, which round-trips `f64` exactly.
    pub fn write(&self, path: &Path) -> Result<(), CatalogError> {
        let mut out = String::new();
        out.push_str(&format!("dim={} count={}\n", self.dim, self.len()));
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in self.row(i) {
                out.push_str(&format!(" {v:.16e}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

/// Filter over the catalog; unset fields do not constrain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolFilter {
    pub split: Option<Split>,
    pub partition: Option<Partition>,
    pub center: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl PoolFilter {
    pub fn healthy_train() -> Self {
        Self { split: Some(Split::Train), partition: Some(Partition::Negative), ..Self::default() }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_partition(mut self, partition: Partition) -> Self {
        self.partition = Some(partition);
        self
    }

    pub fn with_center(mut self, center: impl Into<String>) -> Self {
        self.center = Some(center.into());
        self
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub task: String,
    pub negative_labels: Vec<String>,
    pub positive_labels: Vec<String>,
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
    embeddings: Option<EmbeddingTable>,
    /// Sidecar path as written in the manifest header, if any.
    pub embeddings_path: Option<String>,
}

impl Catalog {
    /// Builds a catalog, validating ids, labels and (if given) embeddings.
    /// Records keep the order they were supplied in.
    pub fn new(
        task: impl Into<String>,
        negative_labels: Vec<String>,
        positive_labels: Vec<String>,
        records: Vec<ImageRecord>,
        embeddings: Option<EmbeddingTable>,
    ) -> Result<Self, CatalogError> {
        for label in &negative_labels {
            if positive_labels.contains(label) {
                return Err(CatalogError::AmbiguousLabel(label.clone()));
            }
        }
        if records.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut catalog = Self {
            task: task.into(),
            negative_labels,
            positive_labels,
            records: Vec::with_capacity(records.len()),
            by_id: HashMap::with_capacity(records.len()),
            embeddings: None,
            embeddings_path: None,
        };
        for record in records {
            catalog.insert(record)?;
        }
        if let Some(table) = embeddings {
            catalog.attach_embeddings(table);
        }
        Ok(catalog)
    }

    fn insert(&mut self, mut record: ImageRecord) -> Result<(), CatalogError> {
        if self.partition_of(&record.label).is_none() {
            return Err(CatalogError::UnknownLabel { id: record.id, label: record.label });
        }
        if self.by_id.contains_key(&record.id) {
            return Err(CatalogError::DuplicateId(record.id));
        }
        record.embedding_ref = None;
        self.by_id.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn attach_embeddings(&mut self, table: EmbeddingTable) {
        for record in &mut self.records {
            record.embedding_ref = table.position(&record.id);
        }
        self.embeddings = Some(table);
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn embeddings(&self) -> Option<&EmbeddingTable> {
        self.embeddings.as_ref()
    }

    pub fn embedding(&self, id: &str) -> Option<&[f64]> {
        let record = self.get(id)?;
        let table = self.embeddings.as_ref()?;
        record.embedding_ref.map(|i| table.row(i))
    }

    pub fn partition_of(&self, label: &str) -> Option<Partition> {
        if self.negative_labels.iter().any(|l| l == label) {
            Some(Partition::Negative)
        } else if self.positive_labels.iter().any(|l| l == label) {
            Some(Partition::Positive)
        } else {
            None
        }
    }

    pub fn is_negative(&self, id: &str) -> bool {
        self.get(id).and_then(|r| self.partition_of(&r.label)) == Some(Partition::Negative)
    }

    /// Union of attribute names carried by any record.
    pub fn attribute_names(&self) -> BTreeSet<&str> {
        self.records.iter().flat_map(|r| r.attributes.keys().map(String::as_str)).collect()
    }

    pub fn centers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.center.as_str()).collect()
    }

    pub fn check_attributes<'a, I>(&self, names: I) -> Result<(), CatalogError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let declared = self.attribute_names();
        for name in names {
            if !declared.contains(name) {
                return Err(CatalogError::UnknownAttribute(name.to_string()));
            }
        }
        Ok(())
    }

    /// Records matching `filter`, sorted by id.
    pub fn pool(&self, filter: &PoolFilter) -> Result<Vec<&ImageRecord>, CatalogError> {
        self.check_attributes(filter.attributes.keys().map(String::as_str))?;
        let mut out: Vec<&ImageRecord> = self
            .records
            .iter()
            .filter(|r| filter.split.is_none_or(|s| r.split == s))
            .filter(|r| filter.partition.is_none_or(|p| self.partition_of(&r.label) == Some(p)))
            .filter(|r| filter.center.as_deref().is_none_or(|c| r.center == c))
            .filter(|r| filter.attributes.iter().all(|(k, v)| r.attribute(k) == Some(v.as_str())))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    /// Counts per (split, partition).
    pub fn partition_counts(&self) -> BTreeMap<(Split, &'static str), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            let p = match self.partition_of(&r.label) {
                Some(Partition::Positive) => "positive",
                _ => "negative",
            };
            *out.entry((r.split, p)).or_insert(0) += 1;
        }
        out
    }

    /// Combines two catalogs of the same task (e.g. a second center used as a
    /// cross-center reference source). Label partitions must agree.
    pub fn merge(mut self, other: Catalog) -> Result<Catalog, CatalogError> {
        if self.task != other.task {
            return Err(CatalogError::Merge(format!("task {:?} vs {:?}", self.task, other.task)));
        }
        for label in &other.negative_labels {
            if self.positive_labels.contains(label) {
                return Err(CatalogError::AmbiguousLabel(label.clone()));
            }
            if !self.negative_labels.contains(label) {
                self.negative_labels.push(label.clone());
            }
        }
        for label in &other.positive_labels {
            if self.negative_labels.contains(label) {
                return Err(CatalogError::AmbiguousLabel(label.clone()));
            }
            if !self.positive_labels.contains(label) {
                self.positive_labels.push(label.clone());
            }
        }
        let embeddings = match (self.embeddings.take(), other.embeddings) {
            (Some(mut a), Some(b)) => {
                if a.dim() != b.dim() {
                    return Err(CatalogError::Merge("embedding dimensions differ".into()));
                }
                for (i, id) in b.ids().iter().enumerate() {
                    a.push(id.clone(), b.row(i))?;
                }
                Some(a)
            }
            (a, b) => a.or(b),
        };
        for record in other.records {
            self.insert(record)?;
        }
        if let Some(table) = embeddings {
            self.attach_embeddings(table);
        }
        Ok(self)
    }

    pub fn header_line(&self) -> String {
        let mut line = format!(
            "{MANIFEST_MAGIC} {SCHEMA_VERSION} task={} negatives={} positives={}",
            self.task,
            self.negative_labels.join(","),
            self.positive_labels.join(",")
        );
        if let Some(path) = &self.embeddings_path {
            line.push_str(&format!(" embeddings={path}"));
        }
        line
    }

    /// Writes the manifest (and the embedding sidecar, when the catalog has
    /// embeddings and an `embeddings_path`, resolved relative to the manifest).
    pub fn write_manifest(&self, path: &Path) -> Result<(), CatalogError> {
        let mut out = Vec::new();
        writeln!(out, "{}", self.header_line()).expect("write to vec");
        for record in &self.records {
            let json = serde_json::to_string(record).expect("record serializes");
            writeln!(out, "{json}").expect("write to vec");
        }
        fs::write(path, out).map_err(io_err(path))?;
        if let (Some(rel), Some(table)) = (&self.embeddings_path, &self.embeddings) {
            let sidecar = resolve_relative(path, rel);
            table.write(&sidecar)?;
        }
        Ok(())
    }
}

fn resolve_relative(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestHeader {
    pub version: String,
    pub task: String,
    pub negatives: Vec<String>,
    pub positives: Vec<String>,
    pub embeddings: Option<String>,
}

pub fn parse_header(line: &str) -> Result<ManifestHeader, CatalogError> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(MANIFEST_MAGIC) {
        return Err(CatalogError::Header(format!("expected {MANIFEST_MAGIC:?} at start of line 1")));
    }
    let version = toks.next().ok_or_else(|| CatalogError::Header("missing schema version".into()))?;
    let mut fields: Vec<(String, String)> = Vec::new();
    for tok in toks {
        match tok.split_once('=') {
            Some((k, v)) => fields.push((k.to_string(), v.to_string())),
            None => match fields.last_mut() {
                Some((_, v)) => {
                    v.push(' ');
                    v.push_str(tok);
                }
                None => return Err(CatalogError::Header(format!("stray token {tok:?}"))),
            },
        }
    }
    let mut header = ManifestHeader {
        version: version.to_string(),
        task: String::new(),
        negatives: Vec::new(),
        positives: Vec::new(),
        embeddings: None,
    };
    let split_labels = |v: &str| -> Vec<String> {
        v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    };
    for (k, v) in fields {
        match k.as_str() {
            "task" => header.task = v,
            "negatives" => header.negatives = split_labels(&v),
            "positives" => header.positives = split_labels(&v),
            "embeddings" => header.embeddings = (!v.is_empty()).then_some(v),
            other => return Err(CatalogError::Header(format!("unknown key {other:?}"))),
        }
    }
    if header.task.is_empty() {
        return Err(CatalogError::Header("missing task".into()));
    }
    if header.negatives.is_empty() {
        return Err(CatalogError::Header("no negative labels declared".into()));
    }
    Ok(header)
}

/// Loads a manifest; `schema_version` must match the header (e.g. `"v1"`).
pub fn load_manifest(path: &Path, schema_version: &str) -> Result<Catalog, CatalogError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CatalogError::Header("empty file".into()))?
        .map_err(io_err(path))?;
    let header = parse_header(&first)?;
    if header.version != schema_version {
        return Err(CatalogError::SchemaVersion { found: header.version, expected: schema_version.to_string() });
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| CatalogError::MalformedLine { line: n + 2, reason: e.to_string() })?;
        if record.id.is_empty() {
            return Err(CatalogError::MalformedLine { line: n + 2, reason: "empty id".into() });
        }
        records.push(record);
    }
    let embeddings = match &header.embeddings {
        Some(rel) => Some(EmbeddingTable::read(&resolve_relative(path, rel))?),
        None => None,
    };
    let mut catalog = Catalog::new(header.task, header.negatives, header.positives, records, embeddings)?;
    catalog.embeddings_path = header.embeddings;
    Ok(catalog)
}
