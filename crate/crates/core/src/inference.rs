//! Prompt construction, the chat gateway protocol, and the two
//! classification pipelines.
//!
//! Zero-shot sends every selected resource in one call. Multi-turn first asks
//! one clue agent per available source for bracketed keyword clues, then
//! asks a decision agent that only sees the clue texts and the entity name.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasetio::DatasetEntry;
use crate::fetch::{FetchError, Fetcher, Request};
use crate::geotile::Provenance;
use crate::sources::SourceKind;
use crate::taxonomy::{SectionCode, Taxonomy};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const CLUE_MAX_TOKENS: u32 = 512;
pub const NO_EVIDENCE_SENTINEL: &str = "No economic activity clues found.";
pub const TRANSCRIPT_FILE: &str = "transcripts.jsonl";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("entry {entry_id}: configuration requires {resource}, which the entry lacks")]
    MissingResource { entry_id: u64, resource: String },
    #[error("{clue_source} clue payload is empty")]
    EmptyPayload { clue_source: ClueSource },
    #[error("{clue_source} clue payload must be {expected}")]
    PayloadKind { clue_source: ClueSource, expected: &'static str },
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("no transcript for {0}")]
    NotRecorded(String),
    #[error("malformed gateway response: {0}")]
    Malformed(String),
    #[error("transcript {path}: {reason}")]
    Transcript { path: PathBuf, reason: String },
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {reason}")]
    Records { path: PathBuf, reason: String },
    #[error("record sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputConfiguration {
    None,
    Satellite,
    External,
    SatelliteOsm,
    SatelliteExternal,
    All,
}

impl InputConfiguration {
    pub const ALL: [InputConfiguration; 6] = [
        InputConfiguration::None,
        InputConfiguration::Satellite,
        InputConfiguration::External,
        InputConfiguration::SatelliteOsm,
        InputConfiguration::SatelliteExternal,
        InputConfiguration::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputConfiguration::None => "none",
            InputConfiguration::Satellite => "satellite",
            InputConfiguration::External => "external",
            InputConfiguration::SatelliteOsm => "satellite_osm",
            InputConfiguration::SatelliteExternal => "satellite_external",
            InputConfiguration::All => "all",
        }
    }

    pub fn uses_osm(self) -> bool {
        matches!(self, InputConfiguration::SatelliteOsm | InputConfiguration::All)
    }

    pub fn uses_satellite(self) -> bool {
        !matches!(self, InputConfiguration::None | InputConfiguration::External)
    }

    pub fn uses_external(self) -> bool {
        matches!(
            self,
            InputConfiguration::External | InputConfiguration::SatelliteExternal | InputConfiguration::All
        )
    }
}

impl fmt::Display for InputConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputConfiguration {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        InputConfiguration::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| format!("unknown input configuration {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Simple,
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub variant: PromptVariant,
    pub output_mode: OutputMode,
}

impl PromptTemplate {
    pub const SIMPLE_TEXT: PromptTemplate = PromptTemplate { variant: PromptVariant::Simple, output_mode: OutputMode::Text };
    pub const EXTENDED_JSON: PromptTemplate =
        PromptTemplate { variant: PromptVariant::Extended, output_mode: OutputMode::Json };
}

impl FromStr for PromptVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "simple" => Ok(PromptVariant::Simple),
            "extended" => Ok(PromptVariant::Extended),
            _ => Err(format!("unknown prompt variant {s:?}")),
        }
    }
}

impl FromStr for OutputMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(OutputMode::Text),
            "json" => Ok(OutputMode::Json),
            _ => Err(format!("unknown output mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    ZeroShot,
    MultiTurn,
}

impl FromStr for Pipeline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" => Ok(Pipeline::ZeroShot),
            "multi_turn" => Ok(Pipeline::MultiTurn),
            _ => Err(format!("unknown pipeline {s:?}")),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::ZeroShot => "zero_shot",
            Pipeline::MultiTurn => "multi_turn",
        })
    }
}

/// The five per-entry resources, in the fixed clue order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClueSource {
    Osm,
    Satellite,
    Wikidata,
    Wikipedia,
    Website,
}

impl ClueSource {
    pub const ALL: [ClueSource; 5] =
        [ClueSource::Osm, ClueSource::Satellite, ClueSource::Wikidata, ClueSource::Wikipedia, ClueSource::Website];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClueSource::Osm => "osm",
            ClueSource::Satellite => "satellite",
            ClueSource::Wikidata => "wikidata",
            ClueSource::Wikipedia => "wikipedia",
            ClueSource::Website => "website",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ClueSource::Osm => "OSM image",
            ClueSource::Satellite => "Satellite image",
            ClueSource::Wikidata => "Wikidata",
            ClueSource::Wikipedia => "Wikipedia",
            ClueSource::Website => "Website",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, ClueSource::Osm | ClueSource::Satellite)
    }

    pub fn provenance(self) -> Option<Provenance> {
        match self {
            ClueSource::Osm => Some(Provenance::Osm),
            ClueSource::Satellite => Some(Provenance::Satellite),
            _ => None,
        }
    }

    pub fn source_kind(self) -> Option<SourceKind> {
        match self {
            ClueSource::Wikidata => Some(SourceKind::Wikidata),
            ClueSource::Wikipedia => Some(SourceKind::Wikipedia),
            ClueSource::Website => Some(SourceKind::Website),
            _ => None,
        }
    }
}

impl fmt::Display for ClueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl ImageData {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let media_type = if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            "image/png"
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            "image/jpeg"
        } else {
            "application/octet-stream"
        };
        ImageData { media_type: media_type.into(), bytes }
    }

    pub fn data_uri(&self) -> String {
        format!("data:{};base64,{}", self.media_type, base64::engine::general_purpose::STANDARD.encode(&self.bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImageData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    fn system(text: String) -> Self {
        Message { role: Role::System, parts: vec![Part::Text(text)] }
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, Part::Image(_))).count()
    }
}

/// Human-readable rendering with image placeholders; used for goldens and
/// prompt digests.
pub fn render_messages(messages: &[Message]) -> String {
    let mut out = String::new();
    for m in messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str(&format!("=== {role} ===\n"));
        for p in &m.parts {
            match p {
                Part::Text(t) => out.push_str(t),
                Part::Image(img) => out.push_str(&format!(
                    "<image {} {} bytes sha256:{}>",
                    img.media_type,
                    img.bytes.len(),
                    hex::encode(Sha256::digest(&img.bytes))
                )),
            }
            out.push('\n');
        }
    }
    out
}

pub fn prompt_digest(messages: &[Message]) -> String {
    hex::encode(Sha256::digest(render_messages(messages).as_bytes()))
}

/// Resolves `image_paths` of dataset entries.
pub trait ImageLoader: Send + Sync {
    fn load(&self, path: &str) -> Result<ImageData, PromptError>;
}

/// Loads images relative to a dataset directory.
#[derive(Debug, Clone)]
pub struct DirImageLoader {
    pub root: PathBuf,
}

impl DirImageLoader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImageLoader { root: root.into() }
    }
}

impl ImageLoader for DirImageLoader {
    fn load(&self, path: &str) -> Result<ImageData, PromptError> {
        let bytes = fs::read(self.root.join(path))
            .map_err(|e| PromptError::Image { path: path.to_string(), reason: e.to_string() })?;
        Ok(ImageData::from_bytes(bytes))
    }
}

impl ImageLoader for HashMap<String, Vec<u8>> {
    fn load(&self, path: &str) -> Result<ImageData, PromptError> {
        self.get(path)
            .map(|b| ImageData::from_bytes(b.clone()))
            .ok_or_else(|| PromptError::Image { path: path.to_string(), reason: "not found".into() })
    }
}

const TEXT_OUTPUT_PROMPT: &str = "\
You will return only the SECTOR CODE.
If you are not sure about the sector code,
return \"UNK\" as a default value.

Example
A
SINGLE TOKEN RESPONSE ONLY";

const JSON_OUTPUT_PROMPT: &str = "\
You will return a JSON output including the Sector and Explanation.
Explanation should be a short description, less than 50 words,
of why you chose this sector code.

{
  \"EXPLANATION\": \"This belongs to Category A because ...\",
  \"LLM_RESPONSE\": \"A\"
}
DO NOT PRINT ANYTHING OTHER THAN JSON RESPONSE";

const ZERO_SHOT_PROMPT: &str = "\
Role
You are an assistant designed to identify economic activities from heterogeneous geospatial and textual resources.

Inputs
- Images: OpenStreetMap (OSM), Satellite imagery
- Textual: Wikidata, Wikipedia, Website
- Entity name

Visual Analysis (Images)
Identify relevant geospatial features, including but not limited to:
- Buildings
- Terrain
- Streets

Contextual Analysis (Text)
Extract economic context such as:
- Products and services
- Activities
- Business type
- Industry

Task
Based on the extracted attributes and the entity name, predict the corresponding NACE Rev.2 economic activity sector code.

{NACE_CONTEXT}

Available Resources
- osm: OSM image
- satellite: Satellite image
- source: Wikidata / Wikipedia / Website

If no external resources are provided, rely solely on the entity name.

Output Format
{OUTPUT_FORMAT}";

const CLUE_AGENT_PROMPT: &str = "\
You are an agent tasked with extracting explicit economic activity clues
from a single information source.

General Rules
- Only extract activities with direct textual or visual evidence.
- The provided keyword list defines all valid economic activity categories.
- Match only exact keywords or clear synonyms.
- Do not infer, guess, or generalize beyond the source.
- When mentioning an activity, wrap it in [ ] exactly as in the keyword list.
- For every activity, cite the exact supporting feature, tag, phrase, or entity.
- If no activity is present, output exactly: \"No economic activity clues found.\"
- Output language must be English.
- Maximum output length: 512 tokens.

Output Format
Economic activity clues:
- [keyword] supporting evidence from the source";

const DECISION_PROMPT: &str = "\
Role
You are an assistant designed to identify economic activities from multiple, incremental information sources.

Inputs
You may be provided with clues from the following sources:
Wikidata, Wikipedia, Websites, OpenStreetMap (OSM) images, Satellite images

Task
Based on the provided clues and the entity name, identify the corresponding NACE economic activity sector code.

{NACE_CONTEXT}

Note that you may not be given all of the clues.
If no clues are provided, rely solely on the entity name.

Output Format
{OUTPUT_FORMAT}";

pub fn output_prompt(mode: OutputMode) -> &'static str {
    match mode {
        OutputMode::Text => TEXT_OUTPUT_PROMPT,
        OutputMode::Json => JSON_OUTPUT_PROMPT,
    }
}

/// Section listing substituted for `{NACE_CONTEXT}`: codes and titles, plus
/// descriptions (and guideline content where attached) for the extended
/// variant.
pub fn nace_context(taxonomy: &Taxonomy, variant: PromptVariant) -> String {
    let mut out = String::from("NACE Rev.2 sections:");
    for s in taxonomy.sections() {
        out.push_str(&format!("\n{}: {}", s.code.letter(), s.title));
        if variant == PromptVariant::Extended {
            out.push_str(&format!("\n   {}", s.description));
            if let Some(g) = taxonomy.guideline(s.code) {
                for text in [&g.content, &g.additional_content].into_iter().flatten() {
                    out.push_str(&format!("\n   {text}"));
                }
                if let Some(ex) = &g.exclusion {
                    out.push_str(&format!("\n   Excludes: {ex}"));
                }
            }
        }
    }
    out
}

fn fill(template: &str, taxonomy: &Taxonomy, prompt: PromptTemplate) -> String {
    template
        .replace("{NACE_CONTEXT}", &nace_context(taxonomy, prompt.variant))
        .replace("{OUTPUT_FORMAT}", output_prompt(prompt.output_mode))
}

/// Text resources of an entry that carry usable text, in clue order.
pub fn available_sources(entry: &DatasetEntry) -> Vec<ClueSource> {
    ClueSource::ALL
        .into_iter()
        .filter(|s| match (s.provenance(), s.source_kind()) {
            (Some(p), _) => entry.image_path(p).is_some(),
            (_, Some(k)) => entry.source_text(k).is_some(),
            _ => false,
        })
        .collect()
}

/// Sources an input configuration selects for an entry. `all` silently
/// skips what the entry lacks; every other configuration requires each
/// selected image, and `external` variants require at least one text.
pub fn selected_sources(entry: &DatasetEntry, config: InputConfiguration) -> Result<Vec<ClueSource>, PromptError> {
    let available = available_sources(entry);
    let mut out = Vec::new();
    let missing = |resource: &str| PromptError::MissingResource { entry_id: entry.id, resource: resource.into() };
    for src in [ClueSource::Osm, ClueSource::Satellite] {
        let wanted = if src == ClueSource::Osm { config.uses_osm() } else { config.uses_satellite() };
        if wanted {
            if available.contains(&src) {
                out.push(src);
            } else if config != InputConfiguration::All {
                return Err(missing(&format!("{} image", src.as_str())));
            }
        }
    }
    if config.uses_external() {
        let texts: Vec<ClueSource> = available.iter().copied().filter(|s| !s.is_image()).collect();
        if texts.is_empty() && config != InputConfiguration::All {
            return Err(missing("an external text source"));
        }
        out.extend(texts);
    }
    Ok(out)
}

fn source_text(entry: &DatasetEntry, src: ClueSource) -> &str {
    src.source_kind().and_then(|k| entry.source_text(k)).unwrap_or_default()
}

pub fn build_zero_shot_prompt(
    entry: &DatasetEntry,
    images: &dyn ImageLoader,
    config: InputConfiguration,
    template: PromptTemplate,
    taxonomy: &Taxonomy,
) -> Result<Vec<Message>, PromptError> {
    let system = Message::system(fill(ZERO_SHOT_PROMPT, taxonomy, template));
    let mut parts = vec![Part::Text(format!("Entity name: {}", entry.name))];
    for src in selected_sources(entry, config)? {
        match src.provenance() {
            Some(p) => {
                let path = entry.image_path(p).expect("selected images exist");
                parts.push(Part::Text(format!("{}:", src.as_str())));
                parts.push(Part::Image(images.load(path)?));
            }
            None => parts.push(Part::Text(format!("source ({}):\n{}", src.as_str(), source_text(entry, src)))),
        }
    }
    Ok(vec![system, Message { role: Role::User, parts }])
}

/// What a clue agent looks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CluePayload {
    Image(ImageData),
    Text(String),
}

pub fn keyword_list(taxonomy: &Taxonomy) -> String {
    let mut out = String::from("Keyword list:");
    for s in taxonomy.sections() {
        let kws: Vec<String> = s.keywords.iter().map(|k| format!("[{k}]")).collect();
        out.push_str(&format!("\n{} ({}): {}", s.code.letter(), s.title, kws.join(", ")));
    }
    out
}

pub fn build_clue_prompt(
    source: ClueSource,
    payload: &CluePayload,
    taxonomy: &Taxonomy,
) -> Result<Vec<Message>, PromptError> {
    let system = Message::system(format!("{CLUE_AGENT_PROMPT}\n\n{}", keyword_list(taxonomy)));
    let header = format!("Source: {}", source.display_name());
    let parts = match (payload, source.is_image()) {
        (CluePayload::Image(img), true) => vec![Part::Text(header), Part::Image(img.clone())],
        (CluePayload::Text(t), false) => {
            if t.trim().is_empty() {
                return Err(PromptError::EmptyPayload { clue_source: source });
            }
            vec![Part::Text(format!("{header}\n\n{t}"))]
        }
        (_, true) => return Err(PromptError::PayloadKind { clue_source: source, expected: "an image" }),
        (_, false) => return Err(PromptError::PayloadKind { clue_source: source, expected: "text" }),
    };
    Ok(vec![system, Message { role: Role::User, parts }])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClueText {
    pub source: ClueSource,
    pub text: String,
}

impl ClueText {
    /// Case-insensitive containment of "no economic activity", or empty text.
    pub fn is_no_evidence(&self) -> bool {
        self.text.trim().is_empty() || self.text.to_lowercase().contains("no economic activity")
    }
}

pub fn build_decision_prompt(entity_name: &str, clues: &[ClueText], template: PromptTemplate, taxonomy: &Taxonomy) -> Vec<Message> {
    let system = Message::system(fill(DECISION_PROMPT, taxonomy, template));
    let mut sorted: Vec<&ClueText> = clues.iter().collect();
    sorted.sort_by_key(|c| c.source);
    let mut text = format!("Entity name: {entity_name}");
    for c in sorted {
        text.push_str(&format!("\n\nClues from {}:\n{}", c.source.display_name(), c.text.trim()));
    }
    vec![system, Message { role: Role::User, parts: vec![Part::Text(text)] }]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Section(SectionCode),
    Unknown,
    Violation,
}

impl Label {
    pub fn section(self) -> Option<SectionCode> {
        match self {
            Label::Section(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Section(s) => write!(f, "{s}"),
            Label::Unknown => f.write_str("UNK"),
            Label::Violation => f.write_str("VIOLATION"),
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "UNK" => Ok(Label::Unknown),
            "VIOLATION" => Ok(Label::Violation),
            _ => s.parse::<SectionCode>().map(Label::Section).map_err(|e| e.to_string()),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub raw: String,
}

fn parse_label_token(text: &str) -> Option<Label> {
    let t = text.trim();
    let t = t.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(t).trim();
    let upper = t.to_uppercase();
    if upper == "UNK" {
        return Some(Label::Unknown);
    }
    let mut chars = upper.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => SectionCode::from_letter(c).map(Label::Section),
        _ => None,
    }
}

fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (i, _) in raw.match_indices('{') {
        let mut it = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = it.next() {
            return Some(map);
        }
    }
    None
}

/// Total over all inputs: anything that is not a well-formed answer becomes
/// `Label::Violation` with the raw text preserved.
pub fn parse_prediction(raw: &str, mode: OutputMode) -> Prediction {
    let violation = || Prediction { label: Label::Violation, explanation: None, raw: raw.to_string() };
    match mode {
        OutputMode::Text => match parse_label_token(raw) {
            Some(label) => Prediction { label, explanation: None, raw: raw.to_string() },
            None => violation(),
        },
        OutputMode::Json => {
            let Some(obj) = first_json_object(raw) else { return violation() };
            let (Some(Value::String(expl)), Some(Value::String(resp))) = (obj.get("EXPLANATION"), obj.get("LLM_RESPONSE"))
            else {
                return violation();
            };
            match parse_label_token(resp) {
                Some(label) => Prediction { label, explanation: Some(expl.clone()), raw: raw.to_string() },
                None => violation(),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// OpenAI-compatible request body.
    pub fn to_json(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::Image(img) => json!({"type": "image_url", "image_url": {"url": img.data_uri()}}),
                    })
                    .collect();
                json!({"role": m.role, "content": content})
            })
            .collect();
        let mut body = json!({"model": self.model, "messages": messages, "temperature": self.temperature});
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Identifies one model call: `<entry id>/<stage>`.
pub fn call_key(entry_id: u64, stage: &str) -> String {
    format!("{entry_id}/{stage}")
}

pub trait Gateway: Send + Sync {
    fn complete(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// OpenAI-compatible chat completions endpoint. Retries come from the
/// fetcher's policy.
#[derive(Debug, Clone)]
pub struct HttpGateway {
    pub endpoint: String,
    api_key: Option<String>,
    fetcher: Fetcher,
}

impl HttpGateway {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, fetcher: Fetcher) -> Self {
        HttpGateway { endpoint: endpoint.into(), api_key, fetcher }
    }
}

pub fn parse_chat_completion(body: &[u8]) -> Result<(String, Usage), GatewayError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect(),
        Value::Null => String::new(),
        other => return Err(GatewayError::Malformed(format!("unexpected content {other}"))),
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok((text, usage))
}

impl Gateway for HttpGateway {
    fn complete(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = serde_json::to_vec(&request.to_json()).expect("request serializes");
        let mut req = Request::post_json(self.endpoint.clone(), body);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let resp = self.fetcher.fetch("gateway", key, &req)?;
        let (content, usage) = parse_chat_completion(&resp.body)?;
        Ok(ChatResponse { content, usage, latency_ms: resp.latency_ms })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranscriptLine {
    key: String,
    #[serde(flatten)]
    response: ChatResponse,
}

/// Replays responses by call key; also used for hand-scripted runs.
#[derive(Debug, Clone, Default)]
pub struct TranscriptGateway {
    responses: HashMap<String, ChatResponse>,
}

impl TranscriptGateway {
    pub fn from_map(map: impl IntoIterator<Item = (String, String)>) -> Self {
        TranscriptGateway {
            responses: map
                .into_iter()
                .map(|(k, content)| (k, ChatResponse { content, usage: Usage::default(), latency_ms: 0 }))
                .collect(),
        }
    }

    /// Load `transcripts.jsonl` from a directory. Later lines win.
    pub fn load(dir: &Path) -> Result<Self, GatewayError> {
        let path = dir.join(TRANSCRIPT_FILE);
        let err = |reason: String| GatewayError::Transcript { path: path.clone(), reason };
        let f = fs::File::open(&path).map_err(|e| err(e.to_string()))?;
        let mut responses = HashMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TranscriptLine = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            responses.insert(t.key, t.response);
        }
        Ok(TranscriptGateway { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Gateway for TranscriptGateway {
    fn complete(&self, key: &str, _request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.responses.get(key).cloned().ok_or_else(|| GatewayError::NotRecorded(key.to_string()))
    }
}

/// Forwards to another gateway and appends every response to a transcript.
pub struct RecordingGateway {
    inner: Arc<dyn Gateway>,
    out: Mutex<fs::File>,
}

impl RecordingGateway {
    pub fn new(inner: Arc<dyn Gateway>, dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let out = fs::OpenOptions::new().create(true).append(true).open(dir.join(TRANSCRIPT_FILE))?;
        Ok(RecordingGateway { inner, out: Mutex::new(out) })
    }
}

impl Gateway for RecordingGateway {
    fn complete(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.complete(key, request)?;
        let mut line = serde_json::to_vec(&TranscriptLine { key: key.to_string(), response: response.clone() })
            .expect("transcript serializes");
        line.push(b'\n');
        let mut f = self.out.lock().unwrap_or_else(|e| e.into_inner());
        let path = || PathBuf::from(TRANSCRIPT_FILE);
        f.write_all(&line)
            .and_then(|_| f.sync_data())
            .map_err(|e| GatewayError::Transcript { path: path(), reason: e.to_string() })?;
        Ok(response)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: String,
    pub prompt_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub latency_ms: u64,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub schema_version: u32,
    pub entry_id: u64,
    pub pipeline: Pipeline,
    pub config: InputConfiguration,
    pub template: PromptTemplate,
    pub model_id: String,
    #[serde(default)]
    pub clues: Vec<ClueText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub calls: Vec<CallRecord>,
    pub latency_ms: u64,
    pub usage: Usage,
}

impl InferenceRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub config: InputConfiguration,
    pub template: PromptTemplate,
    pub model_id: String,
    pub temperature: f32,
    /// Output budget of classification calls.
    pub max_tokens: Option<u32>,
    pub clue_max_tokens: u32,
    pub workers: usize,
}

impl RunConfig {
    pub fn new(pipeline: Pipeline, config: InputConfiguration, template: PromptTemplate, model_id: impl Into<String>) -> Self {
        RunConfig {
            pipeline,
            config,
            template,
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: Some(512),
            clue_max_tokens: CLUE_MAX_TOKENS,
            workers: 1,
        }
    }
}

pub struct PipelineContext<'a> {
    pub taxonomy: &'a Taxonomy,
    pub gateway: &'a dyn Gateway,
    pub images: &'a dyn ImageLoader,
}

struct Call<'c> {
    ctx: &'c PipelineContext<'c>,
    cfg: &'c RunConfig,
    entry_id: u64,
    calls: Vec<CallRecord>,
}

impl Call<'_> {
    fn run(&mut self, stage: &str, messages: Vec<Message>, max_tokens: Option<u32>) -> Result<String, String> {
        let request = ChatRequest {
            model: self.cfg.model_id.clone(),
            messages,
            temperature: self.cfg.temperature,
            max_tokens,
        };
        let prompt_sha256 = prompt_digest(&request.messages);
        match self.ctx.gateway.complete(&call_key(self.entry_id, stage), &request) {
            Ok(r) => {
                self.calls.push(CallRecord {
                    stage: stage.into(),
                    prompt_sha256,
                    response: Some(r.content.clone()),
                    latency_ms: r.latency_ms,
                    usage: r.usage,
                    error: None,
                });
                Ok(r.content)
            }
            Err(e) => {
                let msg = format!("{stage}: {e}");
                self.calls.push(CallRecord {
                    stage: stage.into(),
                    prompt_sha256,
                    response: None,
                    latency_ms: 0,
                    usage: Usage::default(),
                    error: Some(e.to_string()),
                });
                Err(msg)
            }
        }
    }
}

/// Run one entry. Prompt precondition failures are errors; gateway failures
/// produce a failed record.
pub fn run_entry(ctx: &PipelineContext<'_>, entry: &DatasetEntry, cfg: &RunConfig) -> Result<InferenceRecord, PromptError> {
    let mut call = Call { ctx, cfg, entry_id: entry.id, calls: Vec::new() };
    let mut clues = Vec::new();
    let outcome: Result<String, String> = match cfg.pipeline {
        Pipeline::ZeroShot => {
            let messages = build_zero_shot_prompt(entry, ctx.images, cfg.config, cfg.template, ctx.taxonomy)?;
            call.run("zero_shot", messages, cfg.max_tokens)
        }
        Pipeline::MultiTurn => {
            let mut failure = None;
            for src in selected_sources(entry, cfg.config)? {
                let payload = match src.provenance() {
                    Some(p) => CluePayload::Image(ctx.images.load(entry.image_path(p).expect("selected"))?),
                    None => CluePayload::Text(source_text(entry, src).to_string()),
                };
                let messages = build_clue_prompt(src, &payload, ctx.taxonomy)?;
                match call.run(&format!("clue_{src}"), messages, Some(cfg.clue_max_tokens)) {
                    Ok(text) => clues.push(ClueText { source: src, text: text.trim().to_string() }),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            match failure {
                Some(e) => Err(e),
                None => {
                    let messages = build_decision_prompt(&entry.name, &clues, cfg.template, ctx.taxonomy);
                    call.run("decision", messages, cfg.max_tokens)
                }
            }
        }
    };
    let calls = call.calls;
    let latency_ms = calls.iter().map(|c| c.latency_ms).sum();
    let usage = calls.iter().fold(Usage::default(), |a, c| Usage {
        prompt_tokens: a.prompt_tokens + c.usage.prompt_tokens,
        completion_tokens: a.completion_tokens + c.usage.completion_tokens,
    });
    let (prediction, failure) = match outcome {
        Ok(raw) => (Some(parse_prediction(&raw, cfg.template.output_mode)), None),
        Err(e) => (None, Some(e)),
    };
    Ok(InferenceRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        entry_id: entry.id,
        pipeline: cfg.pipeline,
        config: cfg.config,
        template: cfg.template,
        model_id: cfg.model_id.clone(),
        clues,
        prediction,
        failure,
        calls,
        latency_ms,
        usage,
    })
}

/// Run a pipeline over `entries` with `cfg.workers` threads. Records are
/// handed to `on_record` in entry order as soon as they are ready; the
/// returned list has the same order.
pub fn run_pipeline(
    ctx: &PipelineContext<'_>,
    entries: &[DatasetEntry],
    cfg: &RunConfig,
    mut on_record: impl FnMut(&InferenceRecord) -> Result<(), InferenceError>,
) -> Result<Vec<InferenceRecord>, InferenceError> {
    let workers = cfg.workers.clamp(1, entries.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<InferenceRecord, PromptError>)>();
    let mut out = Vec::with_capacity(entries.len());
    std::thread::scope(|scope| -> Result<(), InferenceError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= entries.len() {
                    break;
                }
                if tx.send((i, run_entry(ctx, &entries[i], cfg))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emit = 0;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&emit) {
                let record = match result {
                    Ok(r) => r,
                    Err(e) => {
                        next.store(entries.len(), Ordering::SeqCst);
                        return Err(e.into());
                    }
                };
                on_record(&record).inspect_err(|_| next.store(entries.len(), Ordering::SeqCst))?;
                out.push(record);
                emit += 1;
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Append-only records file, one JSON record per line, synced after each
/// write.
pub struct RecordWriter {
    path: PathBuf,
    file: fs::File,
    done: BTreeSet<u64>,
}

impl RecordWriter {
    /// Open for appending; ids already present are reported by
    /// [`RecordWriter::completed`]. A torn last line from an interrupted run
    /// is dropped.
    pub fn open(path: &Path) -> Result<Self, InferenceError> {
        let err = |reason: String| InferenceError::Records { path: path.to_path_buf(), reason };
        let mut done = BTreeSet::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            let mut valid_len = 0;
            for line in text.split_inclusive('\n') {
                if !line.ends_with('\n') {
                    break;
                }
                match serde_json::from_str::<InferenceRecord>(line) {
                    Ok(r) => {
                        done.insert(r.entry_id);
                        valid_len += line.len();
                    }
                    Err(_) if line.trim().is_empty() => valid_len += line.len(),
                    Err(e) => return Err(err(format!("corrupt record: {e}"))),
                }
            }
            if valid_len < text.len() {
                let f = fs::OpenOptions::new().write(true).open(path).map_err(|e| err(e.to_string()))?;
                f.set_len(valid_len as u64).map_err(|e| err(e.to_string()))?;
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| err(e.to_string()))?;
        Ok(RecordWriter { path: path.to_path_buf(), file, done })
    }

    pub fn completed(&self) -> &BTreeSet<u64> {
        &self.done
    }

    pub fn append(&mut self, record: &InferenceRecord) -> Result<(), InferenceError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| InferenceError::Records { path: self.path.clone(), reason: e.to_string() })?;
        self.done.insert(record.entry_id);
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<InferenceRecord>, InferenceError> {
    let text = fs::read_to_string(path).map_err(|e| InferenceError::Records { path: path.to_path_buf(), reason: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| InferenceError::Records {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
