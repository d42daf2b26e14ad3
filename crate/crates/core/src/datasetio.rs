//! Benchmark entries on disk.
//!
//! A dataset directory holds `entries.jsonl` (one entry per line) and
//! `manifest.json`. Both carry a `schema_version`. Output is byte-stable:
//! struct fields serialize in declaration order, maps in key order, floats
//! in shortest round-trip form.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{resource_histogram, ElementType, LabeledElement, ResourceHistogram, TagMap, EXTERNAL_LINK_KEYS};
use crate::geotile::{BBox, Provenance};
use crate::sources::SourceKind;
use crate::taxonomy::{SectionCode, Taxonomy};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("entry {id}: invalid field `{field}`: {reason}")]
    Invalid { id: u64, field: &'static str, reason: String },
    #[error("entry {id}: {kind} text mentions the section assignment ({pattern:?})")]
    Leak { id: u64, kind: SourceKind, pattern: String },
    #[error("duplicate entry id {0}")]
    DuplicateId(u64),
    #[error("{path}:{line}: {reason}")]
    Schema { path: PathBuf, line: usize, reason: String },
    #[error("unsupported schema_version {found} in {path}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One external source as stored: locator plus extracted text when the text
/// was kept. `text: None` marks a locator-only record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: u64,
    #[serde(rename = "type")]
    pub element_type: ElementType,
    pub name: String,
    pub bbox: BBox,
    pub osm_tags: TagMap,
    pub category: SectionCode,
    pub image_paths: BTreeMap<Provenance, String>,
    pub sources: BTreeMap<SourceKind, SourceRecord>,
}

impl DatasetEntry {
    /// Entry skeleton for a labeled element. The name and the link tags
    /// move out of `osm_tags` into `name` and (later) `sources`.
    pub fn from_labeled(labeled: &LabeledElement, image_paths: BTreeMap<Provenance, String>) -> Self {
        let el = &labeled.element;
        let osm_tags = el
            .tags
            .iter()
            .filter(|(k, _)| k.as_str() != "name" && !EXTERNAL_LINK_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        DatasetEntry {
            id: el.id,
            element_type: el.element_type,
            name: el.name().unwrap_or_default().to_string(),
            bbox: el.bbox,
            osm_tags,
            category: labeled.category,
            image_paths,
            sources: BTreeMap::new(),
        }
    }

    pub fn image_path(&self, provenance: Provenance) -> Option<&str> {
        self.image_paths.get(&provenance).map(String::as_str).filter(|p| !p.is_empty())
    }

    pub fn source_text(&self, kind: SourceKind) -> Option<&str> {
        self.sources.get(&kind).and_then(|s| s.text.as_deref()).filter(|t| !t.trim().is_empty())
    }

    /// Check every entry invariant except the leak scan.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |field, reason: &str| DatasetError::Invalid { id: self.id, field, reason: reason.to_string() };
        if self.name.trim().is_empty() {
            return Err(invalid("name", "empty"));
        }
        if self.category == SectionCode::T {
            return Err(invalid("category", "section T cannot be derived from OSM"));
        }
        for p in [Provenance::Osm, Provenance::Satellite] {
            if self.image_path(p).is_none() {
                return Err(invalid("image_paths", &format!("missing {p} image")));
            }
        }
        if self.sources.is_empty() {
            return Err(invalid("sources", "no external source"));
        }
        for (kind, s) in &self.sources {
            if s.locator.trim().is_empty() {
                return Err(invalid("sources", &format!("{kind} without locator")));
            }
        }
        Ok(())
    }
}

/// A suspicious passage found by [`leak_scan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakFinding {
    pub kind: SourceKind,
    pub pattern: String,
}

const TITLE_STOPWORDS: [&str; 6] = ["and", "of", "the", "for", "own", "other"];

/// Heuristic scan for source texts that state the entry's section: the token
/// `NACE`, or `section <letter>` for the entry's letter followed within a
/// few words by a word of the section title.
pub fn leak_scan(entry: &DatasetEntry, taxonomy: &Taxonomy) -> Vec<LeakFinding> {
    let letter = entry.category.letter().to_ascii_lowercase();
    let title_words: BTreeSet<String> = words(&taxonomy.section(entry.category).title)
        .into_iter()
        .filter(|w| w.len() > 2 && !TITLE_STOPWORDS.contains(&w.as_str()))
        .collect();
    let mut out = Vec::new();
    for (kind, record) in &entry.sources {
        let Some(text) = &record.text else { continue };
        let toks = words(text);
        if toks.iter().any(|w| w == "nace") {
            out.push(LeakFinding { kind: *kind, pattern: "NACE".into() });
            continue;
        }
        let hit = toks.windows(2).enumerate().any(|(i, w)| {
            w[0] == "section"
                && w[1].len() == 1
                && w[1].starts_with(letter)
                && toks[i + 2..].iter().take(6).any(|t| title_words.contains(t))
        });
        if hit {
            out.push(LeakFinding { kind: *kind, pattern: format!("section {}", entry.category.letter()) });
        }
    }
    out
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub provider: String,
    pub attribution: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub version: String,
    /// RFC 3339 timestamp.
    pub created_at: String,
    #[serde(default)]
    pub attributions: Vec<Attribution>,
    pub entry_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Serialize)]
struct EntryOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    entry: &'a DatasetEntry,
}

#[derive(Deserialize)]
struct EntryIn {
    schema_version: u32,
    #[serde(flatten)]
    entry: DatasetEntry,
}

impl Dataset {
    pub fn new(name: impl Into<String>, version: impl Into<String>, created_at: impl Into<String>) -> Self {
        Dataset {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                name: name.into(),
                version: version.into(),
                created_at: created_at.into(),
                attributions: Vec::new(),
                entry_count: 0,
            },
            entries: Vec::new(),
        }
    }

    /// Validate entries, ids and the leak invariant.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(DatasetError::DuplicateId(e.id));
            }
            e.validate()?;
            if let Some(f) = leak_scan(e, taxonomy).into_iter().next() {
                return Err(DatasetError::Leak { id: e.id, kind: f.kind, pattern: f.pattern });
            }
        }
        Ok(())
    }

    pub fn entries_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for entry in &self.entries {
            serde_json::to_writer(&mut out, &EntryOut { schema_version: SCHEMA_VERSION, entry })
                .expect("entries serialize");
            out.push(b'\n');
        }
        out
    }

    /// Validate, then write both files into `dir` (created if needed).
    pub fn write(&self, dir: &Path, taxonomy: &Taxonomy) -> Result<(), DatasetError> {
        self.validate(taxonomy)?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let entries_path = dir.join(ENTRIES_FILE);
        write_file(&entries_path, &self.entries_bytes())?;
        let mut manifest = self.manifest.clone();
        manifest.entry_count = self.entries.len();
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_file(&dir.join(MANIFEST_FILE), &bytes)
    }

    /// Read and fully validate a dataset directory.
    pub fn read(dir: &Path, taxonomy: &Taxonomy) -> Result<Self, DatasetError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
            path: manifest_path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::Version { path: manifest_path, found: manifest.schema_version });
        }
        let entries_path = dir.join(ENTRIES_FILE);
        let entries = read_entries(&entries_path)?;
        let ds = Dataset { manifest, entries };
        ds.validate(taxonomy)?;
        Ok(ds)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

/// Parse an entries file without the dataset-level checks.
pub fn read_entries(path: &Path) -> Result<Vec<DatasetEntry>, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |reason: String| DatasetError::Schema { path: path.to_path_buf(), line: i + 1, reason };
        let rec: EntryIn = serde_json::from_str(&line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()));
            match id {
                Some(id) => schema(format!("entry {id}: {e}")),
                None => schema(e.to_string()),
            }
        })?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::Version { path: path.to_path_buf(), found: rec.schema_version });
        }
        entries.push(rec.entry);
    }
    Ok(entries)
}

/// Mean number of each resource per entry of a section.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ResourceMeans {
    pub osm_image: f64,
    pub satellite_image: f64,
    pub wikidata: f64,
    pub wikipedia: f64,
    pub website: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub total: usize,
    /// Every observable section, zero when absent.
    pub entries_per_section: BTreeMap<SectionCode, usize>,
    pub mean_resources: BTreeMap<SectionCode, ResourceMeans>,
    pub histogram: ResourceHistogram,
}

pub fn summarize(dataset: &Dataset) -> DatasetSummary {
    let mut counts: BTreeMap<SectionCode, usize> = SectionCode::observable().map(|s| (s, 0)).collect();
    let mut sums: BTreeMap<SectionCode, [usize; 5]> = SectionCode::observable().map(|s| (s, [0; 5])).collect();
    for e in &dataset.entries {
        *counts.entry(e.category).or_insert(0) += 1;
        let s = sums.entry(e.category).or_insert([0; 5]);
        let present = [
            e.image_path(Provenance::Osm).is_some(),
            e.image_path(Provenance::Satellite).is_some(),
            e.sources.contains_key(&SourceKind::Wikidata),
            e.sources.contains_key(&SourceKind::Wikipedia),
            e.sources.contains_key(&SourceKind::Website),
        ];
        for (slot, p) in s.iter_mut().zip(present) {
            *slot += p as usize;
        }
    }
    let mean_resources = sums
        .iter()
        .map(|(code, s)| {
            let n = counts[code];
            let m = |v: usize| if n == 0 { 0.0 } else { v as f64 / n as f64 };
            let means = ResourceMeans {
                osm_image: m(s[0]),
                satellite_image: m(s[1]),
                wikidata: m(s[2]),
                wikipedia: m(s[3]),
                website: m(s[4]),
            };
            (*code, means)
        })
        .collect();
    DatasetSummary {
        total: dataset.entries.len(),
        entries_per_section: counts,
        mean_resources,
        histogram: resource_histogram(&dataset.entries),
    }
}

impl DatasetSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!("entries: {}\n\nsection  count  osm_img  sat_img  wikidata  wikipedia  website\n", self.total);
        for (code, n) in &self.entries_per_section {
            let m = self.mean_resources[code];
            s.push_str(&format!(
                "{:<7}  {:>5}  {:>7.2}  {:>7.2}  {:>8.2}  {:>9.2}  {:>7.2}\n",
                code.letter(),
                n,
                m.osm_image,
                m.satellite_image,
                m.wikidata,
                m.wikipedia,
                m.website
            ));
        }
        s.push_str("\nsource combination  count\n");
        for (combo, n) in &self.histogram.counts {
            s.push_str(&format!("{:<18}  {n:>5}\n", combo.to_string()));
        }
        if !self.histogram.flagged.is_empty() {
            s.push_str(&format!("entries without sources: {:?}\n", self.histogram.flagged));
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "total": self.total,
            "entries_per_section": self.entries_per_section.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
            "mean_resources": self.mean_resources.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
            "source_combinations": self.histogram.counts.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
            "flagged": self.histogram.flagged,
        })
    }
}
