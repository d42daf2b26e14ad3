//! NACE Rev. 2 section taxonomy, the keyword lexicon used by clue agents, and
//! the NACE to OSM tag mapping.
//!
//! The lexicon and the mapping ship as versioned data files under `data/` and
//! are embedded at compile time, so [`Taxonomy::builtin`] and
//! [`TagMapping::builtin`] work without touching the filesystem.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_LEXICON: &str = include_str!("../data/nace_lexicon.tsv");
const BUILTIN_MAPPING: &str = include_str!("../data/nace_osm_mapping.tsv");
const BUILTIN_GUIDELINE_K: &str = include_str!("../data/guidelines/K.json");

/// Number of NACE Rev. 2 sections, and the dimension of every frequency vector.
pub const SECTION_COUNT: usize = 21;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("invalid section code {0:?}")]
    InvalidCode(String),
    #[error("keyword {keyword:?} listed under both section {first} and section {second}")]
    DuplicateKeyword {
        keyword: String,
        first: SectionCode,
        second: SectionCode,
    },
    #[error("section {0} appears more than once")]
    DuplicateSection(SectionCode),
    #[error("section {0} missing from lexicon")]
    MissingSection(SectionCode),
    #[error("section {0} has no keywords")]
    EmptyKeywords(SectionCode),
    #[error("invalid keyword {0:?}: only lowercase letters and hyphens allowed")]
    InvalidKeyword(String),
    #[error("tag {tag} maps to section T, which cannot be observed in OSM")]
    TargetsT { tag: OsmTag },
    #[error("tag {0} maps to an empty section set")]
    EmptyTarget(OsmTag),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("guideline extract: {0}")]
    Guideline(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("bare key {0:?}: tags must have the form key=value")]
    BareKey(String),
    #[error("malformed tag {0:?}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagListError {
    #[error("not a list of quoted tags: {0}")]
    Format(String),
    #[error("element {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: TagError,
    },
}

/// A single-letter NACE section, `A` through `U`.
///
/// Ordering is alphabetical and [`SectionCode::index`] gives the frequency
/// vector dimension (A = 0, U = 20).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SectionCode(u8);

impl SectionCode {
    pub const T: SectionCode = SectionCode(19);

    pub fn from_index(index: usize) -> Option<Self> {
        (index < SECTION_COUNT).then_some(SectionCode(index as u8))
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'A'..='U' => Some(SectionCode(c as u8 - b'A')),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        (b'A' + self.0) as char
    }

    pub fn all() -> impl Iterator<Item = SectionCode> + Clone {
        (0..SECTION_COUNT as u8).map(SectionCode)
    }

    /// The 20 sections that can be observed through OSM (everything but T).
    pub fn observable() -> impl Iterator<Item = SectionCode> + Clone {
        Self::all().filter(|c| *c != Self::T)
    }
}

impl fmt::Display for SectionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for SectionCode {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                SectionCode::from_letter(c).ok_or_else(|| TaxonomyError::InvalidCode(s.to_string()))
            }
            _ => Err(TaxonomyError::InvalidCode(s.to_string())),
        }
    }
}

impl Serialize for SectionCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        serializer.serialize_str(self.letter().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for SectionCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaceSection {
    pub code: SectionCode,
    pub title: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub obtainable_from_osm: bool,
}

/// Fields of an official guideline entry, flattened from the RDF/XML source.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GuidelineExtract {
    #[serde(alias = "Official Name")]
    pub official_name: String,
    #[serde(default, alias = "Alternative Name")]
    pub alternative_name: Option<String>,
    #[serde(default, alias = "Scope")]
    pub scope: Option<String>,
    #[serde(default, alias = "Content")]
    pub content: Option<String>,
    #[serde(default, alias = "Additional Content")]
    pub additional_content: Option<String>,
    #[serde(default, alias = "Exclusion")]
    pub exclusion: Option<String>,
}

impl GuidelineExtract {
    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let extract: GuidelineExtract =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Guideline(e.to_string()))?;
        if extract.official_name.trim().is_empty() {
            return Err(TaxonomyError::Guideline("official_name is empty".into()));
        }
        Ok(extract)
    }

    /// Section letter taken from the leading token of the official name
    /// ("K FINANCIAL AND ..." -> K).
    pub fn section_code(&self) -> Option<SectionCode> {
        self.official_name
            .split_whitespace()
            .next()
            .and_then(|tok| tok.parse().ok())
    }

    /// `Label: value` lines for every field that is present.
    pub fn render_fields(&self) -> String {
        let fields = [
            ("Official Name", Some(&self.official_name)),
            ("Alternative Name", self.alternative_name.as_ref()),
            ("Scope", self.scope.as_ref()),
            ("Content", self.content.as_ref()),
            ("Additional Content", self.additional_content.as_ref()),
            ("Exclusion", self.exclusion.as_ref()),
        ];
        let mut out = String::new();
        for (label, value) in fields {
            if let Some(v) = value.filter(|v| !v.trim().is_empty()) {
                out.push_str(label);
                out.push_str(": ");
                out.push_str(v.trim());
                out.push('\n');
            }
        }
        out
    }
}

/// The 21 NACE sections with their keyword lexicon.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    sections: Vec<NaceSection>,
    keyword_index: HashMap<String, SectionCode>,
    guidelines: BTreeMap<SectionCode, GuidelineExtract>,
}

impl Taxonomy {
    /// Lexicon shipped with the crate, with the bundled section K guideline.
    pub fn builtin() -> Self {
        let mut taxonomy = Self::parse(BUILTIN_LEXICON).expect("bundled lexicon is valid");
        let k = GuidelineExtract::from_json(BUILTIN_GUIDELINE_K).expect("bundled guideline is valid");
        taxonomy.attach_guideline(k).expect("bundled guideline names section K");
        taxonomy
    }

    pub fn load(lexicon_file: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = lexicon_file.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut slots: Vec<Option<NaceSection>> = vec![None; SECTION_COUNT];
        let mut keyword_index: HashMap<String, SectionCode> = HashMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(TaxonomyError::Syntax {
                    line: lineno + 1,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let code: SectionCode = fields[0].trim().parse()?;
            if slots[code.index()].is_some() {
                return Err(TaxonomyError::DuplicateSection(code));
            }
            let mut keywords = Vec::new();
            for kw in fields[3].split(',').map(str::trim).filter(|k| !k.is_empty()) {
                let kw = normalize_keyword(kw);
                if !is_valid_keyword(&kw) {
                    return Err(TaxonomyError::InvalidKeyword(kw));
                }
                if let Some(&first) = keyword_index.get(&kw) {
                    return Err(TaxonomyError::DuplicateKeyword {
                        keyword: kw,
                        first,
                        second: code,
                    });
                }
                keyword_index.insert(kw.clone(), code);
                keywords.push(kw);
            }
            if keywords.is_empty() {
                return Err(TaxonomyError::EmptyKeywords(code));
            }
            slots[code.index()] = Some(NaceSection {
                code,
                title: fields[1].trim().to_string(),
                description: fields[2].trim().to_string(),
                keywords,
                obtainable_from_osm: code != SectionCode::T,
            });
        }

        let mut sections = Vec::with_capacity(SECTION_COUNT);
        for (i, slot) in slots.into_iter().enumerate() {
            let code = SectionCode::from_index(i).unwrap();
            sections.push(slot.ok_or(TaxonomyError::MissingSection(code))?);
        }
        Ok(Taxonomy {
            sections,
            keyword_index,
            guidelines: BTreeMap::new(),
        })
    }

    /// Attach an official guideline extract to its section (used by the
    /// extended prompt context).
    pub fn attach_guideline(&mut self, extract: GuidelineExtract) -> Result<(), TaxonomyError> {
        let code = extract.section_code().ok_or_else(|| {
            TaxonomyError::Guideline(format!(
                "cannot read a section letter from {:?}",
                extract.official_name
            ))
        })?;
        self.guidelines.insert(code, extract);
        Ok(())
    }

    pub fn guideline(&self, code: SectionCode) -> Option<&GuidelineExtract> {
        self.guidelines.get(&code)
    }

    pub fn sections(&self) -> &[NaceSection] {
        &self.sections
    }

    pub fn section(&self, code: SectionCode) -> &NaceSection {
        &self.sections[code.index()]
    }

    /// Case-insensitive keyword lookup.
    pub fn section_for_keyword(&self, keyword: &str) -> Option<SectionCode> {
        self.keyword_index.get(&normalize_keyword(keyword)).copied()
    }
}

pub fn normalize_keyword(keyword: &str) -> String {
    keyword.trim().to_lowercase()
}

fn is_valid_keyword(kw: &str) -> bool {
    !kw.is_empty()
        && kw.chars().all(|c| c.is_ascii_lowercase() || c == '-')
        && !kw.starts_with('-')
        && !kw.ends_with('-')
}

/// An OSM `key=value` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OsmTag {
    key: String,
    value: String,
}

impl OsmTag {
    pub fn new(key: impl Into<String>, value: impl Into<String>) -> Result<Self, TagError> {
        let key = key.into().trim().to_string();
        let value = value.into().trim().to_string();
        if key.is_empty() || value.is_empty() || key.contains('=') || value.contains('=') {
            return Err(TagError::Malformed(format!("{key}={value}")));
        }
        Ok(OsmTag { key, value })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

impl fmt::Display for OsmTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key, self.value)
    }
}

impl FromStr for OsmTag {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tag(s)
    }
}

/// Split on the first `=`, trimming both halves.
pub fn parse_tag(text: &str) -> Result<OsmTag, TagError> {
    let Some((key, value)) = text.split_once('=') else {
        return Err(TagError::BareKey(text.trim().to_string()));
    };
    OsmTag::new(key, value).map_err(|_| TagError::Malformed(text.trim().to_string()))
}

/// Parse a model response that should be a Python-style list of quoted
/// `key=value` strings. Code fences are tolerated; duplicates are dropped
/// keeping the first occurrence.
pub fn parse_llm_tag_list(response: &str) -> Result<Vec<OsmTag>, TagListError> {
    let body = strip_code_fence(response.trim());
    let items = parse_quoted_list(body)?;
    let mut seen = BTreeSet::new();
    let mut tags = Vec::new();
    for (index, item) in items.iter().enumerate() {
        let tag = parse_tag(item).map_err(|source| TagListError::Element { index, source })?;
        if seen.insert(tag.clone()) {
            tags.push(tag);
        }
    }
    Ok(tags)
}

fn strip_code_fence(s: &str) -> &str {
    let Some(rest) = s.strip_prefix("```") else {
        return s;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn parse_quoted_list(s: &str) -> Result<Vec<String>, TagListError> {
    let fail = |why: &str| TagListError::Format(why.to_string());
    let mut chars = s.chars().peekable();
    let skip_ws = |it: &mut std::iter::Peekable<std::str::Chars<'_>>| {
        while it.peek().is_some_and(|c| c.is_whitespace()) {
            it.next();
        }
    };

    skip_ws(&mut chars);
    if chars.next() != Some('[') {
        return Err(fail("expected '['"));
    }
    let mut items = Vec::new();
    loop {
        skip_ws(&mut chars);
        match chars.peek().copied() {
            Some(']') => {
                chars.next();
                break;
            }
            Some(q @ ('"' | '\'')) => {
                chars.next();
                let mut item = String::new();
                loop {
                    match chars.next() {
                        Some('\\') => match chars.next() {
                            Some(c) => item.push(c),
                            None => return Err(fail("unterminated escape")),
                        },
                        Some(c) if c == q => break,
                        Some(c) => item.push(c),
                        None => return Err(fail("unterminated string")),
                    }
                }
                items.push(item);
                skip_ws(&mut chars);
                match chars.next() {
                    Some(',') => continue,
                    Some(']') => break,
                    _ => return Err(fail("expected ',' or ']' after element")),
                }
            }
            Some(_) => return Err(fail("list elements must be quoted strings")),
            None => return Err(fail("unterminated list")),
        }
    }
    skip_ws(&mut chars);
    if chars.next().is_some() {
        return Err(fail("trailing text after list"));
    }
    Ok(items)
}

const MAPPING_PROMPT_HEAD: &str = "\
Task Description

You will be given a description of a NACE code, representing a business activity.
Your task is to identify relevant OpenStreetMap (OSM) tags that can be used to classify businesses or locations corresponding to this activity.

NACE Code Description:
";

const MAPPING_PROMPT_TAIL: &str = "\
Response Format

Your response must consist only of a Python list of OSM tags, where each element is a string in the form key=value.

[\"landuse=retail\", \"shop=supermarket\", \"amenity=parking\"]

Constraints
- Every tag must include an = sign (e.g., shop=supermarket)
- Do not include bare keys such as shop or amenity
- Do not include explanations or additional text
- Do not include Python code markers
- Do not use tags unrelated to business activities (e.g., landuse=forest)
- Output only the Python list

OSM Tags:
";

/// Prompt asking a model to propose OSM tags for one guideline extract.
pub fn render_mapping_prompt(extract: &GuidelineExtract) -> String {
    let mut out = String::from(MAPPING_PROMPT_HEAD);
    out.push_str(&extract.render_fields());
    out.push('\n');
    out.push_str(MAPPING_PROMPT_TAIL);
    out
}

/// Association from OSM tags to the NACE sections they indicate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagMapping {
    entries: BTreeMap<OsmTag, BTreeSet<SectionCode>>,
}

impl TagMapping {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_MAPPING).expect("bundled mapping is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parse `key=value<TAB>SECTION[,SECTION...]` records. Repeated tags
    /// merge their section sets.
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut mapping = TagMapping::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some((tag, sections)) = line.split_once('\t') else {
                return Err(TaxonomyError::Syntax {
                    line: lineno + 1,
                    reason: "expected key=value<TAB>SECTIONS".into(),
                });
            };
            let tag = parse_tag(tag)?;
            let codes = sections
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(SectionCode::from_str)
                .collect::<Result<BTreeSet<_>, _>>()?;
            mapping.insert(tag, codes)?;
        }
        Ok(mapping)
    }

    pub fn insert(
        &mut self,
        tag: OsmTag,
        sections: impl IntoIterator<Item = SectionCode>,
    ) -> Result<(), TaxonomyError> {
        let sections: BTreeSet<_> = sections.into_iter().collect();
        if sections.is_empty() {
            return Err(TaxonomyError::EmptyTarget(tag));
        }
        if sections.contains(&SectionCode::T) {
            return Err(TaxonomyError::TargetsT { tag });
        }
        self.entries.entry(tag).or_default().extend(sections);
        Ok(())
    }

    pub fn sections_for_tag(&self, tag: &OsmTag) -> BTreeSet<SectionCode> {
        self.entries.get(tag).cloned().unwrap_or_default()
    }

    pub fn sections_for_key_value(&self, key: &str, value: &str) -> Option<&BTreeSet<SectionCode>> {
        let tag = OsmTag::new(key, value).ok()?;
        self.entries.get(&tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&OsmTag, &BTreeSet<SectionCode>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of mapped tags per section.
    pub fn tags_per_section(&self) -> BTreeMap<SectionCode, usize> {
        let mut counts = BTreeMap::new();
        for sections in self.entries.values() {
            for s in sections {
                *counts.entry(*s).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Render in the mapping file grammar, one tag per line, sorted by tag.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# NACE section to OSM tag mapping\n");
        for (tag, sections) in &self.entries {
            let codes: Vec<String> = sections.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("{tag}\t{}\n", codes.join(",")));
        }
        out
    }
}
