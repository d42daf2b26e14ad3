//! External text resources attached to an element: Wikidata entity records,
//! Wikipedia article text, and website landing-page text.
//!
//! All retrieval goes through [`crate::fetch::Fetcher`], so a fixture store
//! can stand in for the network.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use scraper::{ElementRef, Html, Node};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::TagMap;
use crate::datasetio::{DatasetEntry, SourceRecord};
use crate::fetch::{FetchError, Fetcher, Request};

pub const DEFAULT_BUDGET_CHARS: usize = 8_000;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("{locator}: unsupported content type {content_type:?}")]
    UnsupportedContent { locator: String, content_type: String },
    #[error("{locator}: unexpected response: {reason}")]
    Decode { locator: String, reason: String },
    #[error("invalid {kind} locator {locator:?}")]
    Locator { kind: SourceKind, locator: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Wikidata,
    Wikipedia,
    Website,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Wikidata, SourceKind::Wikipedia, SourceKind::Website];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Wikidata => "wikidata",
            SourceKind::Wikipedia => "wikipedia",
            SourceKind::Website => "website",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub kind: SourceKind,
    pub locator: String,
}

impl SourceRef {
    /// Validate and normalize a locator for `kind`.
    pub fn new(kind: SourceKind, locator: &str) -> Result<Self, SourceError> {
        let locator = locator.trim();
        let bad = || SourceError::Locator { kind, locator: locator.to_string() };
        let normalized = match kind {
            SourceKind::Wikidata => {
                let digits = locator.strip_prefix('Q').ok_or_else(bad)?;
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                locator.to_string()
            }
            SourceKind::Wikipedia => {
                let (lang, title) = split_wikipedia(locator).ok_or_else(bad)?;
                format!("{lang}:{title}")
            }
            SourceKind::Website => {
                if !is_http_url(locator) {
                    return Err(bad());
                }
                locator.to_string()
            }
        };
        Ok(SourceRef { kind, locator: normalized })
    }
}

/// `de:Title` or `https://de.wikipedia.org/wiki/Title` -> (`de`, `Title`).
fn split_wikipedia(locator: &str) -> Option<(String, String)> {
    if let Some(rest) = locator
        .strip_prefix("https://")
        .or_else(|| locator.strip_prefix("http://"))
    {
        let (host, path) = rest.split_once('/')?;
        let lang = host.strip_suffix(".wikipedia.org")?;
        let title = path.strip_prefix("wiki/")?;
        let title = percent_decode(title).replace('_', " ");
        return valid_lang(lang).then(|| (lang.to_string(), title)).filter(|(_, t)| !t.trim().is_empty());
    }
    let (lang, title) = locator.split_once(':')?;
    let (lang, title) = (lang.trim(), title.trim());
    (valid_lang(lang) && !title.is_empty()).then(|| (lang.to_string(), title.to_string()))
}

fn valid_lang(lang: &str) -> bool {
    (2..=12).contains(&lang.len()) && lang.chars().all(|c| c.is_ascii_lowercase() || c == '-')
}

fn is_http_url(s: &str) -> bool {
    let Some(rest) = s.strip_prefix("https://").or_else(|| s.strip_prefix("http://")) else {
        return false;
    };
    let host = rest.split(['/', '?', '#']).next().unwrap_or("");
    !host.is_empty() && host.contains('.') && !s.chars().any(char::is_whitespace)
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            if let Some(b) = s.get(i + 1..i + 3).and_then(|h| u8::from_str_radix(h, 16).ok()) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// References for the link tags of an element, ordered wikidata, wikipedia,
/// website. `contact:website` is used only when `website` is absent or
/// invalid. Malformed values are skipped and reported in the second list.
pub fn refs_from_tags(tags: &TagMap) -> (Vec<SourceRef>, Vec<String>) {
    let mut refs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut try_key = |key: &str, kind: SourceKind| -> bool {
        let Some(value) = tags.get(key) else { return false };
        match SourceRef::new(kind, value) {
            Ok(r) => {
                refs.push(r);
                true
            }
            Err(e) => {
                diagnostics.push(format!("{key}: {e}"));
                false
            }
        }
    };
    try_key("wikidata", SourceKind::Wikidata);
    try_key("wikipedia", SourceKind::Wikipedia);
    if !try_key("website", SourceKind::Website) {
        try_key("contact:website", SourceKind::Website);
    }
    (refs, diagnostics)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    #[serde(rename = "ref")]
    pub source_ref: SourceRef,
    pub text: String,
    pub retrieved_at: DateTime<Utc>,
    pub truncated: bool,
}

/// Cut `text` to at most `budget` characters.
pub fn truncate_chars(text: &str, budget: usize) -> (String, bool) {
    match text.char_indices().nth(budget) {
        Some((byte, _)) => (text[..byte].to_string(), true),
        None => (text.to_string(), false),
    }
}

/// Retrieves and normalizes external sources.
#[derive(Debug, Clone)]
pub struct SourceFetcher {
    fetcher: Fetcher,
    pub budget_chars: usize,
    pub wikidata_endpoint: String,
    /// `{lang}` is replaced by the article language.
    pub wikipedia_endpoint: String,
}

impl SourceFetcher {
    pub fn new(fetcher: Fetcher) -> Self {
        SourceFetcher {
            fetcher,
            budget_chars: DEFAULT_BUDGET_CHARS,
            wikidata_endpoint: "https://www.wikidata.org/wiki/Special:EntityData".into(),
            wikipedia_endpoint: "https://{lang}.wikipedia.org/w/api.php".into(),
        }
    }

    pub fn with_budget(mut self, budget_chars: usize) -> Self {
        self.budget_chars = budget_chars;
        self
    }

    pub fn fetch(&self, source_ref: &SourceRef) -> Result<SourceDocument, SourceError> {
        let kind = source_ref.kind.as_str();
        let loc = &source_ref.locator;
        let full = match source_ref.kind {
            SourceKind::Wikidata => {
                let url = format!("{}/{loc}.json", self.wikidata_endpoint);
                let resp = self.fetcher.fetch(kind, loc, &Request::get(url))?;
                let json: Value = serde_json::from_slice(&resp.body)
                    .map_err(|e| SourceError::Decode { locator: loc.clone(), reason: e.to_string() })?;
                project_wikidata(&json, loc)
                    .ok_or_else(|| SourceError::Decode { locator: loc.clone(), reason: "entity missing".into() })?
            }
            SourceKind::Wikipedia => {
                let (lang, title) = split_wikipedia(loc)
                    .ok_or_else(|| SourceError::Locator { kind: source_ref.kind, locator: loc.clone() })?;
                let url = format!(
                    "{}?action=query&prop=extracts&explaintext=1&redirects=1&format=json&titles={}",
                    self.wikipedia_endpoint.replace("{lang}", &lang),
                    percent_encode(&title)
                );
                let resp = self.fetcher.fetch(kind, loc, &Request::get(url))?;
                let json: Value = serde_json::from_slice(&resp.body)
                    .map_err(|e| SourceError::Decode { locator: loc.clone(), reason: e.to_string() })?;
                wikipedia_extract(&json)
                    .ok_or_else(|| SourceError::Decode { locator: loc.clone(), reason: "no extract".into() })?
            }
            SourceKind::Website => {
                let resp = self.fetcher.fetch(kind, loc, &Request::get(loc.as_str()).header("Accept", "text/html"))?;
                let content_type = resp.content_type.clone().unwrap_or_default();
                let is_html = content_type.contains("html")
                    || (content_type.is_empty() && sniff_html(&resp.body));
                if !is_html {
                    return Err(SourceError::UnsupportedContent { locator: loc.clone(), content_type });
                }
                extract_website_text(&String::from_utf8_lossy(&resp.body))
            }
        };
        let (text, truncated) = truncate_chars(&full, self.budget_chars);
        Ok(SourceDocument { source_ref: source_ref.clone(), text, retrieved_at: Utc::now(), truncated })
    }
}

fn sniff_html(body: &[u8]) -> bool {
    let head = String::from_utf8_lossy(&body[..body.len().min(512)]).to_lowercase();
    head.contains("<html") || head.contains("<!doctype html")
}

/// Compact text rendering of a Wikidata entity document: label and
/// description lines (English first, then other languages in code order)
/// followed by one `Pnnn: value` line per claim value, properties in
/// numeric order.
pub fn project_wikidata(doc: &Value, qid: &str) -> Option<String> {
    let entity = doc.get("entities")?.get(qid).or_else(|| {
        // Redirected ids come back under the target id.
        doc.get("entities")?.as_object()?.values().next()
    })?;
    let mut lines = Vec::new();
    for (field, name) in [("labels", "label"), ("descriptions", "description")] {
        if let Some(map) = entity.get(field).and_then(Value::as_object) {
            let mut langs: Vec<&String> = map.keys().collect();
            langs.sort_by_key(|l| (l.as_str() != "en", l.as_str()));
            for lang in langs {
                if let Some(v) = map[lang].get("value").and_then(Value::as_str) {
                    lines.push(format!("{name} ({lang}): {v}"));
                }
            }
        }
    }
    if let Some(claims) = entity.get("claims").and_then(Value::as_object) {
        let mut props: Vec<&String> = claims.keys().collect();
        props.sort_by_key(|p| (p.trim_start_matches('P').parse::<u64>().unwrap_or(u64::MAX), p.as_str()));
        for p in props {
            for statement in claims[p].as_array().into_iter().flatten() {
                if let Some(v) = statement.get("mainsnak").and_then(render_snak) {
                    lines.push(format!("{p}: {v}"));
                }
            }
        }
    }
    Some(lines.join("\n"))
}

fn render_snak(snak: &Value) -> Option<String> {
    let dv = snak.get("datavalue")?;
    let value = dv.get("value")?;
    Some(match dv.get("type").and_then(Value::as_str)? {
        "wikibase-entityid" => value.get("id").and_then(Value::as_str)?.to_string(),
        "string" => value.as_str()?.to_string(),
        "monolingualtext" => value.get("text").and_then(Value::as_str)?.to_string(),
        "time" => value.get("time").and_then(Value::as_str)?.to_string(),
        "quantity" => {
            let amount = value.get("amount").and_then(Value::as_str)?;
            let unit = value.get("unit").and_then(Value::as_str).unwrap_or("1");
            match unit.rsplit('/').next() {
                Some(u) if u != "1" => format!("{amount} {u}"),
                _ => amount.to_string(),
            }
        }
        "globecoordinate" => format!(
            "{}, {}",
            value.get("latitude").and_then(Value::as_f64)?,
            value.get("longitude").and_then(Value::as_f64)?
        ),
        _ => value.to_string(),
    })
}

fn wikipedia_extract(doc: &Value) -> Option<String> {
    let pages = doc.get("query")?.get("pages")?.as_object()?;
    let page = pages.values().next()?;
    if page.get("missing").is_some() {
        return None;
    }
    let extract = page.get("extract")?.as_str()?;
    Some(normalize_lines(extract))
}

const DROPPED: [&str; 12] = [
    "script", "style", "nav", "footer", "noscript", "template", "head", "iframe", "svg", "form", "button", "select",
];

const BLOCK: [&str; 32] = [
    "p", "h1", "h2", "h3", "h4", "h5", "h6", "li", "ul", "ol", "dl", "dt", "dd", "div", "section", "article", "main",
    "header", "aside", "blockquote", "pre", "table", "tr", "td", "th", "figcaption", "address", "br", "hr", "body",
    "title", "label",
];

/// Visible text of an HTML page: script, style, nav and footer subtrees are
/// dropped, every block element starts a new line, whitespace inside a line
/// is collapsed and empty lines removed. Input without markup is treated as
/// already-extracted text and only line-normalized, which makes the
/// extraction idempotent.
pub fn extract_website_text(html: &str) -> String {
    if !looks_like_markup(html) {
        return normalize_lines(html);
    }
    let doc = Html::parse_document(html);
    let mut lines: Vec<String> = vec![String::new()];
    let root = doc.root_element();
    let body = root
        .children()
        .filter_map(ElementRef::wrap)
        .find(|e| e.value().name() == "body")
        .unwrap_or(root);
    walk(body, &mut lines);
    normalize_lines(&lines.join("\n"))
}

fn walk(el: ElementRef<'_>, lines: &mut Vec<String>) {
    for child in el.children() {
        match child.value() {
            Node::Text(t) => {
                let cur = lines.last_mut().expect("at least one line");
                cur.extend(t.chars().map(|c| if c.is_whitespace() { ' ' } else { c }));
            }
            Node::Element(e) => {
                let name = e.name();
                if DROPPED.contains(&name) {
                    continue;
                }
                let block = BLOCK.contains(&name);
                if block {
                    lines.push(String::new());
                }
                walk(ElementRef::wrap(child).expect("element node"), lines);
                if block {
                    lines.push(String::new());
                }
            }
            _ => {}
        }
    }
}

fn looks_like_markup(s: &str) -> bool {
    let b = s.as_bytes();
    b.windows(2)
        .any(|w| w[0] == b'<' && (w[1].is_ascii_alphabetic() || w[1] == b'/' || w[1] == b'!'))
}

fn normalize_lines(text: &str) -> String {
    text.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Store fetched documents on the entry, keyed by kind. The returned flag is
/// true when the entry ends up without any source and therefore cannot be
/// part of a gold dataset.
pub fn attach_sources(mut entry: DatasetEntry, docs: &[SourceDocument]) -> (DatasetEntry, bool) {
    let mut sources = BTreeMap::new();
    for d in docs {
        sources.entry(d.source_ref.kind).or_insert_with(|| SourceRecord {
            locator: d.source_ref.locator.clone(),
            text: Some(d.text.clone()),
            truncated: d.truncated,
        });
    }
    entry.sources = sources;
    let flagged = entry.sources.is_empty();
    (entry, flagged)
}
