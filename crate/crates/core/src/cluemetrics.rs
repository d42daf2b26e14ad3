//! Clue analysis and evaluation metrics.
//!
//! Every clue text is reduced to a 21-dimensional keyword frequency vector.
//! For one inference the ground-truth projection `v_g` collects, per source,
//! the vector entry at the true section, and the prediction projection `v_p`
//! the entry at the predicted section. Averaging those per source gives
//! correctness and effectiveness. All arithmetic is exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::datasetio::Dataset;
use crate::inference::{ClueSource, ClueText, InferenceRecord, Label, Pipeline};
use crate::taxonomy::{SectionCode, Taxonomy, SECTION_COUNT};

pub type Q = BigRational;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("record for entry {0} does not resolve in the dataset")]
    UnknownEntry(u64),
    #[error("no scorable records")]
    Empty,
}

fn q(n: u64, d: u64) -> Q {
    Ratio::new(BigInt::from(n), BigInt::from(d))
}

fn q_zero() -> Q {
    Q::zero()
}

/// Decimal rendering for reports.
pub fn to_f64(v: &Q) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// `n/d` for proper fractions, integers without a denominator.
pub fn fmt_exact(v: &Q) -> String {
    if v.is_integer() {
        v.numer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

/// Bracketed keywords of a clue text, with multiplicity, resolved against
/// the lexicon. Unknown bracketed tokens are dropped and reported.
pub fn extract_keywords(text: &str, taxonomy: &Taxonomy) -> (Vec<(String, SectionCode)>, Vec<String>) {
    let mut hits = Vec::new();
    let mut diagnostics = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find([']', '[', '\n']) else { break };
        if after.as_bytes()[close] != b']' {
            rest = &after[close..];
            continue;
        }
        let token = after[..close].trim().to_lowercase();
        match taxonomy.section_for_keyword(&token) {
            Some(section) => hits.push((token, section)),
            None => diagnostics.push(format!("unknown keyword [{token}]")),
        }
        rest = &after[close + 1..];
    }
    (hits, diagnostics)
}

/// Normalized per-section keyword counts for one (inference, source) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyVector {
    counts: [u64; SECTION_COUNT],
    total: u64,
}

impl FrequencyVector {
    pub fn zero() -> Self {
        FrequencyVector { counts: [0; SECTION_COUNT], total: 0 }
    }

    pub fn from_keywords<'a, I>(keywords: I) -> Self
    where
        I: IntoIterator<Item = &'a (String, SectionCode)>,
    {
        let mut v = FrequencyVector::zero();
        for (_, s) in keywords {
            v.counts[s.index()] += 1;
            v.total += 1;
        }
        v
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_zero(&self) -> bool {
        self.total == 0
    }

    pub fn get(&self, section: SectionCode) -> Q {
        if self.total == 0 {
            q_zero()
        } else {
            q(self.counts[section.index()], self.total)
        }
    }

    pub fn values(&self) -> Vec<Q> {
        SectionCode::all().map(|s| self.get(s)).collect()
    }

    pub fn sum(&self) -> Q {
        self.values().into_iter().fold(q_zero(), |a, b| a + b)
    }
}

pub fn frequency_vector(keywords: &[(String, SectionCode)]) -> FrequencyVector {
    FrequencyVector::from_keywords(keywords)
}

/// Frequency vectors for the sources one inference had clues for.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClueProfile {
    pub vectors: BTreeMap<ClueSource, FrequencyVector>,
}

impl ClueProfile {
    pub fn from_clues(clues: &[ClueText], taxonomy: &Taxonomy) -> (Self, Vec<String>) {
        let mut profile = ClueProfile::default();
        let mut diagnostics = Vec::new();
        for c in clues {
            let (kws, diags) = extract_keywords(&c.text, taxonomy);
            diagnostics.extend(diags.into_iter().map(|d| format!("{}: {d}", c.source)));
            profile.vectors.insert(c.source, frequency_vector(&kws));
        }
        (profile, diagnostics)
    }

    pub fn present(&self) -> impl Iterator<Item = ClueSource> + '_ {
        self.vectors.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    GroundTruth,
    Prediction,
}

/// Per-source components (osm, satellite, wikidata, wikipedia, website) of
/// the frequency vectors at one section index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionVector {
    pub values: [Q; 5],
    pub kind: ProjectionKind,
    pub index_label: SectionCode,
}

impl ProjectionVector {
    pub fn get(&self, source: ClueSource) -> &Q {
        &self.values[source.index()]
    }

    pub fn render(&self) -> String {
        let parts: Vec<String> = self.values.iter().map(fmt_exact).collect();
        format!("[{}]", parts.join(", "))
    }
}

pub fn project(profile: &ClueProfile, label: SectionCode, kind: ProjectionKind) -> ProjectionVector {
    let values = ClueSource::ALL.map(|s| profile.vectors.get(&s).map_or_else(q_zero, |v| v.get(label)));
    ProjectionVector { values, kind, index_label: label }
}

fn mean_component(projections: &[ProjectionVector], counts: &[u64; 5]) -> [Option<Q>; 5] {
    ClueSource::ALL.map(|s| {
        let n = counts[s.index()];
        (n > 0).then(|| {
            let sum = projections.iter().fold(q_zero(), |a, p| a + p.get(s));
            sum / Q::from_integer(BigInt::from(n))
        })
    })
}

/// Mean ground-truth component per source; `None` where `I_c = 0`.
pub fn correctness(projections: &[ProjectionVector], counts: &[u64; 5]) -> [Option<Q>; 5] {
    mean_component(projections, counts)
}

/// Mean prediction component per source; `None` where `I_c = 0`.
pub fn effectiveness(projections: &[ProjectionVector], counts: &[u64; 5]) -> [Option<Q>; 5] {
    mean_component(projections, counts)
}

/// `1 - NEI_c / I_c`, undefined for `I_c = 0`.
pub fn information_discovery(nei: u64, i: u64) -> Option<Q> {
    (i > 0).then(|| Q::from_integer(BigInt::from(1)) - q(nei, i))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMetrics {
    pub precision: Q,
    pub recall: Q,
    pub f1: Q,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Averages {
    pub precision: Q,
    pub recall: Q,
    pub f1: Q,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceMetrics {
    /// Multi-turn inferences with a clue from this source.
    pub inferences: u64,
    pub no_evidence: u64,
    pub information_discovery: Option<Q>,
    pub correctness: Option<Q>,
    /// Inferences with a clue from this source and a section prediction.
    pub effectiveness_inferences: u64,
    pub effectiveness: Option<Q>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordProjection {
    pub entry_id: u64,
    pub truth: SectionCode,
    pub predicted: Label,
    pub v_g: ProjectionVector,
    pub v_p: Option<ProjectionVector>,
}

pub const UNK_COLUMN: usize = SECTION_COUNT;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricReport {
    /// Non-failed records.
    pub inferences: u64,
    pub failed: u64,
    pub correct: u64,
    pub unknown: u64,
    pub violations: u64,
    pub accuracy: Q,
    pub unknown_ratio: Q,
    pub instruction_violation_ratio: Q,
    /// Rows are true sections, columns predicted sections plus `UNK_COLUMN`.
    pub confusion: Vec<[u64; SECTION_COUNT + 1]>,
    /// Violations per true section, kept out of the matrix.
    pub violations_by_truth: [u64; SECTION_COUNT],
    pub per_class: BTreeMap<SectionCode, ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    /// Present only when multi-turn records were scored.
    pub sources: Option<BTreeMap<ClueSource, SourceMetrics>>,
    pub projections: Vec<RecordProjection>,
    pub diagnostics: Vec<String>,
}

fn ratio(n: u64, d: u64) -> Q {
    if d == 0 {
        q_zero()
    } else {
        q(n, d)
    }
}

fn f1(p: &Q, r: &Q) -> Q {
    let s = p + r;
    if s.is_zero() {
        q_zero()
    } else {
        Q::from_integer(BigInt::from(2)) * p * r / s
    }
}

/// Score inference records against their dataset.
pub fn score(records: &[InferenceRecord], dataset: &Dataset, taxonomy: &Taxonomy) -> Result<MetricReport, ScoreError> {
    let truth: HashMap<u64, SectionCode> = dataset.entries.iter().map(|e| (e.id, e.category)).collect();
    let mut confusion = vec![[0u64; SECTION_COUNT + 1]; SECTION_COUNT];
    let mut violations_by_truth = [0u64; SECTION_COUNT];
    let (mut inferences, mut failed, mut correct, mut unknown, mut violations) = (0, 0, 0, 0, 0);
    let mut predicted_counts = [0u64; SECTION_COUNT];
    let mut diagnostics = Vec::new();

    let mut src_i = [0u64; 5];
    let mut src_nei = [0u64; 5];
    let mut src_eff_i = [0u64; 5];
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut projections = Vec::new();
    let mut any_multi = false;

    for r in records {
        let t = *truth.get(&r.entry_id).ok_or(ScoreError::UnknownEntry(r.entry_id))?;
        let Some(pred) = &r.prediction else {
            failed += 1;
            continue;
        };
        inferences += 1;
        match pred.label {
            Label::Section(p) => {
                confusion[t.index()][p.index()] += 1;
                predicted_counts[p.index()] += 1;
                if p == t {
                    correct += 1;
                }
            }
            Label::Unknown => {
                confusion[t.index()][UNK_COLUMN] += 1;
                unknown += 1;
            }
            Label::Violation => {
                violations_by_truth[t.index()] += 1;
                violations += 1;
            }
        }
        if r.pipeline == Pipeline::MultiTurn {
            any_multi = true;
            let (profile, diags) = ClueProfile::from_clues(&r.clues, taxonomy);
            diagnostics.extend(diags.into_iter().map(|d| format!("entry {}: {d}", r.entry_id)));
            for c in &r.clues {
                src_i[c.source.index()] += 1;
                if c.is_no_evidence() {
                    src_nei[c.source.index()] += 1;
                }
            }
            let v_g = project(&profile, t, ProjectionKind::GroundTruth);
            let v_p = pred.label.section().map(|p| {
                for s in profile.present() {
                    src_eff_i[s.index()] += 1;
                }
                project(&profile, p, ProjectionKind::Prediction)
            });
            gts.push(v_g.clone());
            if let Some(v) = &v_p {
                preds.push(v.clone());
            }
            projections.push(RecordProjection { entry_id: r.entry_id, truth: t, predicted: pred.label, v_g, v_p });
        }
    }
    if inferences == 0 {
        return Err(ScoreError::Empty);
    }

    let mut per_class = BTreeMap::new();
    for s in SectionCode::all() {
        let support: u64 = confusion[s.index()].iter().sum::<u64>() + violations_by_truth[s.index()];
        if support == 0 {
            continue;
        }
        let tp = confusion[s.index()][s.index()];
        let precision = ratio(tp, predicted_counts[s.index()]);
        let recall = ratio(tp, support);
        let f = f1(&precision, &recall);
        per_class.insert(s, ClassMetrics { precision, recall, f1: f, support });
    }
    let n_classes = Q::from_integer(BigInt::from(per_class.len()));
    let total_support = Q::from_integer(BigInt::from(per_class.values().map(|c| c.support).sum::<u64>()));
    let avg = |get: &dyn Fn(&ClassMetrics) -> &Q, weighted: bool| -> Q {
        let sum = per_class.values().fold(q_zero(), |a, c| {
            let w = if weighted { Q::from_integer(BigInt::from(c.support)) } else { Q::from_integer(BigInt::from(1)) };
            a + get(c) * w
        });
        sum / if weighted { total_support.clone() } else { n_classes.clone() }
    };
    let macro_avg = Averages { precision: avg(&|c| &c.precision, false), recall: avg(&|c| &c.recall, false), f1: avg(&|c| &c.f1, false) };
    let weighted_avg = Averages { precision: avg(&|c| &c.precision, true), recall: avg(&|c| &c.recall, true), f1: avg(&|c| &c.f1, true) };

    let sources = any_multi.then(|| {
        let corr = correctness(&gts, &src_i);
        let eff = effectiveness(&preds, &src_eff_i);
        ClueSource::ALL
            .into_iter()
            .map(|s| {
                let i = s.index();
                let m = SourceMetrics {
                    inferences: src_i[i],
                    no_evidence: src_nei[i],
                    information_discovery: information_discovery(src_nei[i], src_i[i]),
                    correctness: corr[i].clone(),
                    effectiveness_inferences: src_eff_i[i],
                    effectiveness: eff[i].clone(),
                };
                (s, m)
            })
            .collect()
    });

    Ok(MetricReport {
        inferences,
        failed,
        correct,
        unknown,
        violations,
        accuracy: ratio(correct, inferences),
        unknown_ratio: ratio(unknown, inferences),
        instruction_violation_ratio: ratio(violations, inferences),
        confusion,
        violations_by_truth,
        per_class,
        macro_avg,
        weighted_avg,
        sources,
        projections,
        diagnostics,
    })
}

fn opt_num(v: &Option<Q>) -> Value {
    v.as_ref().map_or(Value::Null, |x| json!(to_f64(x)))
}

fn opt_exact(v: &Option<Q>) -> Value {
    v.as_ref().map_or(Value::Null, |x| json!(fmt_exact(x)))
}

fn fmt_opt(v: &Option<Q>) -> String {
    v.as_ref().map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", to_f64(x)))
}

pub const EFFECTIVENESS_NOTE: &str =
    "effectiveness excludes UNK and VIOLATION predictions from numerator and denominator; I_c counts only inferences where source c has a clue";

impl MetricReport {
    pub fn to_json(&self) -> Value {
        let avg = |a: &Averages| json!({"precision": to_f64(&a.precision), "recall": to_f64(&a.recall), "f1": to_f64(&a.f1)});
        let mut columns: Vec<String> = SectionCode::all().map(|s| s.to_string()).collect();
        columns.push("UNK".into());
        json!({
            "inferences": self.inferences,
            "failed": self.failed,
            "correct": self.correct,
            "unknown": self.unknown,
            "violations": self.violations,
            "accuracy": to_f64(&self.accuracy),
            "unknown_ratio": to_f64(&self.unknown_ratio),
            "instruction_violation_ratio": to_f64(&self.instruction_violation_ratio),
            "exact": {
                "accuracy": fmt_exact(&self.accuracy),
                "unknown_ratio": fmt_exact(&self.unknown_ratio),
                "instruction_violation_ratio": fmt_exact(&self.instruction_violation_ratio),
                "macro_f1": fmt_exact(&self.macro_avg.f1),
                "weighted_f1": fmt_exact(&self.weighted_avg.f1),
            },
            "macro": avg(&self.macro_avg),
            "weighted": avg(&self.weighted_avg),
            "per_class": self.per_class.iter().map(|(s, c)| (s.to_string(), json!({
                "precision": to_f64(&c.precision), "recall": to_f64(&c.recall), "f1": to_f64(&c.f1), "support": c.support,
            }))).collect::<serde_json::Map<_, _>>(),
            "confusion": {
                "rows": SectionCode::all().map(|s| s.to_string()).collect::<Vec<_>>(),
                "columns": columns,
                "matrix": self.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                "violations_by_truth": self.violations_by_truth.to_vec(),
            },
            "sources": self.sources.as_ref().map(|m| m.iter().map(|(s, v)| (s.to_string(), json!({
                "inferences": v.inferences,
                "no_evidence": v.no_evidence,
                "information_discovery": opt_num(&v.information_discovery),
                "correctness": opt_num(&v.correctness),
                "effectiveness_inferences": v.effectiveness_inferences,
                "effectiveness": opt_num(&v.effectiveness),
                "exact": {
                    "information_discovery": opt_exact(&v.information_discovery),
                    "correctness": opt_exact(&v.correctness),
                    "effectiveness": opt_exact(&v.effectiveness),
                },
            }))).collect::<serde_json::Map<_, _>>()),
            "notes": if self.sources.is_some() { vec![EFFECTIVENESS_NOTE] } else { vec![] },
            "projections": self.projections.iter().map(|p| json!({
                "entry_id": p.entry_id,
                "truth": p.truth.to_string(),
                "predicted": p.predicted.to_string(),
                "v_g": p.v_g.values.iter().map(fmt_exact).collect::<Vec<_>>(),
                "v_p": p.v_p.as_ref().map(|v| v.values.iter().map(fmt_exact).collect::<Vec<_>>()),
            })).collect::<Vec<_>>(),
            "diagnostics": self.diagnostics,
        })
    }

    /// Per-source clue metrics as CSV.
    pub fn sources_csv(&self) -> String {
        let mut out = String::from("source,inferences,no_evidence,information_discovery,correctness,effectiveness_inferences,effectiveness\n");
        if let Some(m) = &self.sources {
            let cell = |v: &Option<Q>| v.as_ref().map_or(String::new(), |x| format!("{}", to_f64(x)));
            for (s, v) in m {
                out.push_str(&format!(
                    "{s},{},{},{},{},{},{}\n",
                    v.inferences,
                    v.no_evidence,
                    cell(&v.information_discovery),
                    cell(&v.correctness),
                    v.effectiveness_inferences,
                    cell(&v.effectiveness)
                ));
            }
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "inferences          {}", self.inferences)?;
        writeln!(f, "failed              {}", self.failed)?;
        writeln!(f, "accuracy            {:.4}  ({})", to_f64(&self.accuracy), fmt_exact(&self.accuracy))?;
        writeln!(f, "unknown ratio       {:.4}  ({})", to_f64(&self.unknown_ratio), fmt_exact(&self.unknown_ratio))?;
        writeln!(
            f,
            "violation ratio     {:.4}  ({})",
            to_f64(&self.instruction_violation_ratio),
            fmt_exact(&self.instruction_violation_ratio)
        )?;
        writeln!(f)?;
        writeln!(f, "            precision  recall      f1")?;
        for (name, a) in [("macro", &self.macro_avg), ("weighted", &self.weighted_avg)] {
            writeln!(f, "{name:<10}  {:>9.4}  {:>6.4}  {:>6.4}", to_f64(&a.precision), to_f64(&a.recall), to_f64(&a.f1))?;
        }
        writeln!(f)?;
        writeln!(f, "section  support  precision  recall      f1")?;
        for (s, c) in &self.per_class {
            writeln!(
                f,
                "{:<7}  {:>7}  {:>9.4}  {:>6.4}  {:>6.4}",
                s.letter(),
                c.support,
                to_f64(&c.precision),
                to_f64(&c.recall),
                to_f64(&c.f1)
            )?;
        }
        if let Some(m) = &self.sources {
            writeln!(f)?;
            writeln!(f, "source      I_c  NEI_c  info_disc  correctness  effectiveness")?;
            for (s, v) in m {
                writeln!(
                    f,
                    "{:<9}  {:>4}  {:>5}  {:>9}  {:>11}  {:>13}",
                    s.as_str(),
                    v.inferences,
                    v.no_evidence,
                    fmt_opt(&v.information_discovery),
                    fmt_opt(&v.correctness),
                    fmt_opt(&v.effectiveness)
                )?;
            }
            writeln!(f, "note: {EFFECTIVENESS_NOTE}")?;
            writeln!(f)?;
            for p in &self.projections {
                let vp = p.v_p.as_ref().map_or_else(|| "-".to_string(), |v| v.render());
                writeln!(f, "entry {} truth {} predicted {}: v_g={} v_p={}", p.entry_id, p.truth, p.predicted, p.v_g.render(), vp)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{ClueText, Prediction, PromptTemplate, InputConfiguration, RECORD_SCHEMA_VERSION, Usage};

    fn sc(c: char) -> SectionCode {
        SectionCode::from_letter(c).unwrap()
    }

    #[test]
    fn keyword_extraction() {
        let tax = Taxonomy::builtin();
        let (kws, d) = extract_keywords("[accommodation] hotel roof, [retail] shopfronts, [transport] rail siding", &tax);
        assert_eq!(
            kws,
            vec![("accommodation".into(), sc('I')), ("retail".into(), sc('G')), ("transport".into(), sc('H'))]
        );
        assert!(d.is_empty());
        assert!(extract_keywords("No economic activity clues found.", &tax).0.is_empty());
        let (kws, d) = extract_keywords("[RETAIL] x, [bogus] y", &tax);
        assert_eq!(kws, vec![("retail".into(), sc('G'))]);
        assert_eq!(d.len(), 1);
        let (kws, _) = extract_keywords("[[retail]] and [ unterminated\n[trade]", &tax);
        assert_eq!(kws.len(), 2);
    }

    #[test]
    fn frequency_vectors() {
        let v = frequency_vector(&[("accommodation".into(), sc('I')), ("retail".into(), sc('G')), ("transport".into(), sc('H'))]);
        for c in ['G', 'H', 'I'] {
            assert_eq!(v.get(sc(c)), q(1, 3));
        }
        assert_eq!(v.get(sc('A')), q_zero());
        assert_eq!(frequency_vector(&[("insurance".into(), sc('K'))]).get(sc('K')), q(1, 1));
        assert!(frequency_vector(&[]).sum().is_zero());
        let mut kws: Vec<(String, SectionCode)> = (0..12).map(|_| ("retail".into(), sc('G'))).collect();
        kws.push(("transport".into(), sc('H')));
        assert_eq!(frequency_vector(&kws).get(sc('G')), q(12, 13));
    }

    #[test]
    fn information_discovery_values() {
        assert_eq!(information_discovery(1, 4), Some(q(3, 4)));
        assert_eq!(information_discovery(0, 4), Some(q(1, 1)));
        assert_eq!(information_discovery(4, 4), Some(q_zero()));
        assert_eq!(information_discovery(0, 0), None);
    }

    fn record(id: u64, label: Label) -> InferenceRecord {
        InferenceRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            entry_id: id,
            pipeline: Pipeline::ZeroShot,
            config: InputConfiguration::All,
            template: PromptTemplate::SIMPLE_TEXT,
            model_id: "m".into(),
            clues: vec![],
            prediction: Some(Prediction { label, explanation: None, raw: String::new() }),
            failure: None,
            calls: vec![],
            latency_ms: 0,
            usage: Usage::default(),
        }
    }

    fn dataset_with(truths: &[(u64, char)]) -> Dataset {
        use crate::corpus::ElementType;
        use crate::datasetio::{DatasetEntry, SourceRecord};
        use crate::geotile::{BBox, Provenance};
        use crate::sources::SourceKind;
        let mut d = Dataset::new("t", "1", "now");
        d.entries = truths
            .iter()
            .map(|(id, c)| DatasetEntry {
                id: *id,
                element_type: ElementType::Node,
                name: "n".into(),
                bbox: BBox::new(0.0, 0.0, 0.0, 0.0).unwrap(),
                osm_tags: Default::default(),
                category: sc(*c),
                image_paths: [(Provenance::Osm, "a".to_string()), (Provenance::Satellite, "b".to_string())].into(),
                sources: [(SourceKind::Website, SourceRecord { locator: "x".into(), text: None, truncated: false })].into(),
            })
            .collect();
        d
    }

    #[test]
    fn accuracy_and_unknown_ratio() {
        let tax = Taxonomy::builtin();
        let ds = dataset_with(&(0..10).map(|i| (i, 'C')).collect::<Vec<_>>());
        let mut recs: Vec<_> = (0..6).map(|i| record(i, Label::Section(sc('C')))).collect();
        recs.push(record(6, Label::Unknown));
        recs.push(record(7, Label::Unknown));
        recs.push(record(8, Label::Section(sc('G'))));
        recs.push(record(9, Label::Violation));
        let r = score(&recs, &ds, &tax).unwrap();
        assert_eq!(r.accuracy, q(6, 10));
        assert_eq!(r.unknown_ratio, q(2, 10));
        assert_eq!(r.instruction_violation_ratio, q(1, 10));
        assert!(r.sources.is_none());

        let all_unk: Vec<_> = (0..10).map(|i| record(i, Label::Unknown)).collect();
        let r = score(&all_unk, &ds, &tax).unwrap();
        assert_eq!((r.accuracy.clone(), r.unknown_ratio.clone()), (q_zero(), q(1, 1)));

        assert!(matches!(score(&[record(99, Label::Unknown)], &ds, &tax), Err(ScoreError::UnknownEntry(99))));
        assert!(matches!(score(&[], &ds, &tax), Err(ScoreError::Empty)));
    }

    #[test]
    fn failed_records_are_excluded() {
        let tax = Taxonomy::builtin();
        let ds = dataset_with(&[(1, 'C'), (2, 'C')]);
        let mut failed = record(2, Label::Unknown);
        failed.prediction = None;
        failed.failure = Some("timeout".into());
        let r = score(&[record(1, Label::Section(sc('C'))), failed], &ds, &tax).unwrap();
        assert_eq!((r.inferences, r.failed), (1, 1));
        assert_eq!(r.accuracy, q(1, 1));
    }

    #[test]
    fn multi_turn_clue_metrics() {
        let tax = Taxonomy::builtin();
        let ds = dataset_with(&[(1, 'K'), (2, 'G')]);
        let mut a = record(1, Label::Section(sc('K')));
        a.pipeline = Pipeline::MultiTurn;
        a.clues = vec![
            ClueText { source: ClueSource::Wikidata, text: "- [insurance] insurer".into() },
            ClueText { source: ClueSource::Osm, text: "No economic activity clues found.".into() },
        ];
        let mut b = record(2, Label::Unknown);
        b.pipeline = Pipeline::MultiTurn;
        b.clues = vec![ClueText { source: ClueSource::Wikidata, text: "- [retail] shop".into() }];
        let r = score(&[a, b], &ds, &tax).unwrap();
        let s = r.sources.as_ref().unwrap();
        let wd = &s[&ClueSource::Wikidata];
        assert_eq!(wd.inferences, 2);
        // Entry 1 contributes 1 at K, entry 2 contributes 1 at G.
        assert_eq!(wd.correctness, Some(q(1, 1)));
        assert_eq!(wd.effectiveness_inferences, 1);
        assert_eq!(wd.effectiveness, Some(q(1, 1)));
        let osm = &s[&ClueSource::Osm];
        assert_eq!(osm.information_discovery, Some(q_zero()));
        assert_eq!(osm.correctness, Some(q_zero()));
        assert_eq!(s[&ClueSource::Website].correctness, None);
        assert!(r.to_string().contains("v_g=[0, 0, 1, 0, 0]"));
        assert!(r.sources_csv().starts_with("source,"));
    }
}
