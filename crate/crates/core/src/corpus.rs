//! OSM element filtering (bronze/silver/gold), NACE labeling through the tag
//! mapping, and balanced benchmark sampling.
//!
//! Element stream format (one JSON object per line):
//!
//! ```text
//! {"id": 122563530, "type": "way", "tags": {"name": "...", ...}, "bbox": [min_lon, min_lat, max_lon, max_lat]}
//! {"id": 42, "type": "node", "tags": {...}, "lon": 12.5, "lat": 51.0}
//! ```
//!
//! Nodes may give `lon`/`lat` instead of a bbox; their bbox is then a
//! degenerate point. Overpass JSON (`{"elements": [...]}` produced with
//! `out tags bb;` or `out center;`) is accepted as well.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasetio::DatasetEntry;
use crate::geotile::BBox;
use crate::sources::SourceKind;
use crate::taxonomy::{OsmTag, SectionCode, TagMapping};

pub type TagMap = BTreeMap<String, String>;

/// Tag keys whose presence qualifies an element for the gold tier.
pub const EXTERNAL_LINK_KEYS: [&str; 4] = ["wikidata", "wikipedia", "website", "contact:website"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("section {section} has {available} gold element(s), {required} required")]
    Insufficient {
        section: SectionCode,
        available: usize,
        required: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Node,
    Way,
    Relation,
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementType::Node => "node",
            ElementType::Way => "way",
            ElementType::Relation => "relation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmElement {
    pub id: u64,
    #[serde(rename = "type")]
    pub element_type: ElementType,
    pub tags: TagMap,
    pub bbox: BBox,
}

impl OsmElement {
    pub fn name(&self) -> Option<&str> {
        self.tags.get("name").map(|s| s.trim()).filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTier {
    Bronze,
    Silver,
    Gold,
}

fn has_activity_tag(element: &OsmElement, mapping: &TagMapping) -> bool {
    element
        .tags
        .iter()
        .any(|(k, v)| mapping.sections_for_key_value(k, v).is_some())
}

/// Highest tier an element reaches: bronze needs a name and a mapped activity
/// tag, silver adds any `addr:*` tag, gold adds an external link tag.
pub fn tier_of(element: &OsmElement, mapping: &TagMapping) -> Option<QualityTier> {
    element.name()?;
    if !has_activity_tag(element, mapping) {
        return None;
    }
    if !element.tags.keys().any(|k| k.starts_with("addr:")) {
        return Some(QualityTier::Bronze);
    }
    let linked = EXTERNAL_LINK_KEYS
        .iter()
        .any(|k| element.tags.get(*k).is_some_and(|v| !v.trim().is_empty()));
    Some(if linked { QualityTier::Gold } else { QualityTier::Silver })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledElement {
    pub element: OsmElement,
    pub category: SectionCode,
    /// `None` when the element misses even the bronze requirements.
    pub tier: Option<QualityTier>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub element_id: u64,
    pub kind: String,
    pub message: String,
}

/// Occurrence counts of mapped tags over a pool, used for tag priority.
#[derive(Debug, Clone, Default)]
pub struct TagFrequencies(HashMap<OsmTag, u64>);

impl TagFrequencies {
    pub fn from_pool<'a>(mapping: &TagMapping, pool: impl IntoIterator<Item = &'a OsmElement>) -> Self {
        let mut counts = HashMap::new();
        for el in pool {
            for (k, v) in &el.tags {
                if mapping.sections_for_key_value(k, v).is_some() {
                    if let Ok(tag) = OsmTag::new(k.as_str(), v.as_str()) {
                        *counts.entry(tag).or_insert(0) += 1;
                    }
                }
            }
        }
        TagFrequencies(counts)
    }

    pub fn count(&self, tag: &OsmTag) -> u64 {
        self.0.get(tag).copied().unwrap_or(0)
    }
}

/// Assigns NACE sections to elements.
///
/// When an element's mapped tags point at different sections, the tag with
/// the fewest pool occurrences wins, ties broken by `key=value` order; a
/// winning tag mapped to several sections yields its lowest section. Either
/// case emits an `ambiguous_label` diagnostic.
#[derive(Debug, Clone)]
pub struct Labeler<'m> {
    mapping: &'m TagMapping,
    frequencies: TagFrequencies,
}

impl<'m> Labeler<'m> {
    pub fn new(mapping: &'m TagMapping) -> Self {
        Labeler { mapping, frequencies: TagFrequencies::default() }
    }

    pub fn with_frequencies(mapping: &'m TagMapping, frequencies: TagFrequencies) -> Self {
        Labeler { mapping, frequencies }
    }

    pub fn mapping(&self) -> &TagMapping {
        self.mapping
    }

    /// Winning section plus an optional ambiguity diagnostic.
    pub fn category(&self, element: &OsmElement) -> Option<(SectionCode, Option<Diagnostic>)> {
        let mut matches: Vec<(u64, OsmTag, &BTreeSet<SectionCode>)> = element
            .tags
            .iter()
            .filter_map(|(k, v)| {
                let sections = self.mapping.sections_for_key_value(k, v)?;
                let tag = OsmTag::new(k.as_str(), v.as_str()).ok()?;
                Some((self.frequencies.count(&tag), tag, sections))
            })
            .collect();
        if matches.is_empty() {
            return None;
        }
        matches.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        let (_, winner, sections) = &matches[0];
        let section = *sections.iter().next().expect("mapping never stores empty sets");

        let all: BTreeSet<SectionCode> = matches.iter().flat_map(|m| m.2.iter().copied()).collect();
        let diagnostic = (all.len() > 1).then(|| Diagnostic {
            element_id: element.id,
            kind: "ambiguous_label".into(),
            message: format!(
                "tags map to sections {}; chose {section} via {winner}",
                all.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            ),
        });
        Some((section, diagnostic))
    }

    pub fn label(&self, element: &OsmElement) -> Option<(LabeledElement, Option<Diagnostic>)> {
        let (category, diag) = self.category(element)?;
        let tier = tier_of(element, self.mapping);
        Some((LabeledElement { element: element.clone(), category, tier }, diag))
    }
}

/// Label with lexicographic tag priority (no pool statistics).
pub fn label(element: &OsmElement, mapping: &TagMapping) -> Option<LabeledElement> {
    Labeler::new(mapping).label(element).map(|(l, _)| l)
}

/// Gold elements per observable section, each list shuffled deterministically
/// from `seed`. Taking a prefix of every list is a balanced sample.
pub fn shuffled_gold_by_section(
    pool: &[LabeledElement],
    seed: u64,
) -> BTreeMap<SectionCode, Vec<LabeledElement>> {
    let mut groups: BTreeMap<SectionCode, Vec<LabeledElement>> =
        SectionCode::observable().map(|c| (c, Vec::new())).collect();
    for el in pool.iter().filter(|e| e.tier == Some(QualityTier::Gold)) {
        if let Some(group) = groups.get_mut(&el.category) {
            group.push(el.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in groups.values_mut() {
        // Pool order must not influence the result.
        group.sort_by_key(|e| (e.element.element_type, e.element.id));
        group.dedup_by_key(|e| (e.element.element_type, e.element.id));
        group.shuffle(&mut rng);
    }
    groups
}

/// Exactly `per_section` gold elements from each of the 20 observable
/// sections, grouped by section in code order.
pub fn sample_balanced(
    pool: &[LabeledElement],
    per_section: usize,
    seed: u64,
) -> Result<Vec<LabeledElement>, CorpusError> {
    if per_section == 0 {
        return Ok(Vec::new());
    }
    let groups = shuffled_gold_by_section(pool, seed);
    let mut out = Vec::with_capacity(per_section * groups.len());
    for (section, group) in groups {
        if group.len() < per_section {
            return Err(CorpusError::Insufficient { section, available: group.len(), required: per_section });
        }
        out.extend(group.into_iter().take(per_section));
    }
    Ok(out)
}

/// Exact subset of external text sources an entry carries.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceCombination(pub BTreeSet<SourceKind>);

impl fmt::Display for SourceCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.0.iter().map(|k| k.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResourceHistogram {
    pub counts: BTreeMap<SourceCombination, usize>,
    /// Entries without any external source.
    pub flagged: Vec<u64>,
}

impl ResourceHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

pub fn resource_histogram(entries: &[DatasetEntry]) -> ResourceHistogram {
    let mut hist = ResourceHistogram::default();
    for e in entries {
        let combo = SourceCombination(e.sources.keys().copied().collect());
        if combo.0.is_empty() {
            hist.flagged.push(e.id);
        }
        *hist.counts.entry(combo).or_insert(0) += 1;
    }
    hist
}

#[derive(Deserialize)]
struct StreamRecord {
    id: u64,
    #[serde(rename = "type")]
    element_type: ElementType,
    #[serde(default)]
    tags: TagMap,
    #[serde(default)]
    bbox: Option<BBox>,
    #[serde(default)]
    lon: Option<f64>,
    #[serde(default)]
    lat: Option<f64>,
    /// Overpass `out bb`
    #[serde(default)]
    bounds: Option<OverpassBounds>,
    /// Overpass `out center`
    #[serde(default)]
    center: Option<OverpassPoint>,
}

#[derive(Deserialize)]
struct OverpassBounds {
    minlat: f64,
    minlon: f64,
    maxlat: f64,
    maxlon: f64,
}

#[derive(Deserialize)]
struct OverpassPoint {
    lat: f64,
    lon: f64,
}

impl StreamRecord {
    fn into_element(self) -> Result<OsmElement, String> {
        let bbox = if let Some(b) = self.bbox {
            b
        } else if let Some(b) = self.bounds {
            BBox::new(b.minlon, b.minlat, b.maxlon, b.maxlat).map_err(|e| e.to_string())?
        } else if let (Some(lon), Some(lat)) = (self.lon, self.lat) {
            BBox::point(lon, lat).map_err(|e| e.to_string())?
        } else if let Some(c) = self.center {
            BBox::point(c.lon, c.lat).map_err(|e| e.to_string())?
        } else {
            return Err(format!("element {} has no bbox or coordinates", self.id));
        };
        Ok(OsmElement { id: self.id, element_type: self.element_type, tags: self.tags, bbox })
    }
}

/// Parse the line-delimited element stream.
pub fn read_element_stream(reader: impl BufRead) -> impl Iterator<Item = Result<OsmElement, CorpusError>> {
    reader.lines().enumerate().filter_map(|(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(CorpusError::Record { line: i + 1, reason: e.to_string() })),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(
            serde_json::from_str::<StreamRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(StreamRecord::into_element)
                .map_err(|reason| CorpusError::Record { line: i + 1, reason }),
        )
    })
}

/// Parse an Overpass JSON document. Elements without tags (way nodes) are
/// skipped.
pub fn read_overpass_json(text: &str) -> Result<Vec<OsmElement>, CorpusError> {
    #[derive(Deserialize)]
    struct Doc {
        elements: Vec<StreamRecord>,
    }
    let doc: Doc = serde_json::from_str(text).map_err(|e| CorpusError::Record { line: 0, reason: e.to_string() })?;
    doc.elements
        .into_iter()
        .filter(|r| !r.tags.is_empty())
        .map(|r| r.into_element().map_err(|reason| CorpusError::Record { line: 0, reason }))
        .collect()
}

/// Load elements from a file in either the line-delimited stream format or
/// Overpass JSON.
pub fn load_elements(path: &Path) -> Result<Vec<OsmElement>, CorpusError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') && trimmed.contains("\"elements\"") {
        if let Ok(elements) = read_overpass_json(&text) {
            return Ok(elements);
        }
    }
    read_element_stream(text.as_bytes()).collect()
}

/// Append diagnostics as JSON lines.
pub fn write_diagnostics(mut out: impl Write, diagnostics: &[Diagnostic]) -> std::io::Result<()> {
    for d in diagnostics {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
