use nacekit::cluemetrics::{
    correctness, effectiveness, extract_keywords, frequency_vector, information_discovery, project, score, ClueProfile,
    FrequencyVector, ProjectionKind, Q,
};
use nacekit::corpus::ElementType;
use nacekit::datasetio::{Dataset, DatasetEntry, SourceRecord};
use nacekit::geotile::{BBox, Provenance};
use nacekit::inference::{
    ClueSource, ClueText, InferenceRecord, InputConfiguration, Label, Pipeline, Prediction, PromptTemplate, Usage,
    RECORD_SCHEMA_VERSION,
};
use nacekit::sources::SourceKind;
use nacekit::taxonomy::{SectionCode, Taxonomy};
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;

fn sc(c: char) -> SectionCode {
    SectionCode::from_letter(c).unwrap()
}

fn r(n: i64, d: i64) -> Q {
    Q::new(n.into(), d.into())
}

fn worked_example_clues() -> Vec<ClueText> {
    let osm = format!("Economic activity clues:\n{}- [transport] bus stop", "- [retail] storefront\n".repeat(12));
    vec![
        ClueText { source: ClueSource::Osm, text: osm },
        ClueText { source: ClueSource::Satellite, text: "[accommodation] hotel roof, [retail] shopfronts, [transport] rail siding".into() },
        ClueText { source: ClueSource::Wikidata, text: "- [insurance] instance of insurance company".into() },
        ClueText { source: ClueSource::Wikipedia, text: "- [finance] provides financial services".into() },
        ClueText { source: ClueSource::Website, text: "No economic activity clues found.".into() },
    ]
}

#[test]
fn worked_example_projections() {
    let tax = Taxonomy::builtin();
    let (profile, diags) = ClueProfile::from_clues(&worked_example_clues(), &tax);
    assert!(diags.is_empty());
    let v_g = project(&profile, sc('K'), ProjectionKind::GroundTruth);
    let v_p = project(&profile, sc('G'), ProjectionKind::Prediction);
    assert_eq!(v_g.values, [r(0, 1), r(0, 1), r(1, 1), r(1, 1), r(0, 1)]);
    assert_eq!(v_p.values, [r(12, 13), r(1, 3), r(0, 1), r(0, 1), r(0, 1)]);
    let counts = [1; 5];
    let c = correctness(std::slice::from_ref(&v_g), &counts);
    let e = effectiveness(std::slice::from_ref(&v_p), &counts);
    assert_eq!(c[ClueSource::Wikidata.index()], Some(r(1, 1)));
    assert_eq!(c[ClueSource::Wikipedia.index()], Some(r(1, 1)));
    for s in [ClueSource::Osm, ClueSource::Satellite, ClueSource::Website] {
        assert_eq!(c[s.index()], Some(r(0, 1)));
    }
    assert_eq!(e[ClueSource::Satellite.index()], Some(r(1, 3)));
    assert_eq!(e[ClueSource::Osm.index()], Some(r(12, 13)));
    assert_eq!(e[ClueSource::Wikidata.index()], Some(r(0, 1)));
}

#[test]
fn two_inference_mean() {
    let tax = Taxonomy::builtin();
    let (a, _) = ClueProfile::from_clues(&[ClueText { source: ClueSource::Wikidata, text: "[insurance]".into() }], &tax);
    let (b, _) = ClueProfile::from_clues(&[ClueText { source: ClueSource::Wikidata, text: "[retail]".into() }], &tax);
    let gs = [project(&a, sc('K'), ProjectionKind::GroundTruth), project(&b, sc('K'), ProjectionKind::GroundTruth)];
    assert_eq!(correctness(&gs, &[0, 0, 2, 0, 0])[ClueSource::Wikidata.index()], Some(r(1, 2)));
    assert_eq!(correctness(&gs, &[0, 0, 2, 0, 0])[ClueSource::Osm.index()], None);
}

fn entry(id: u64, c: char) -> DatasetEntry {
    DatasetEntry {
        id,
        element_type: ElementType::Node,
        name: format!("e{id}"),
        bbox: BBox::new(1.0, 1.0, 1.0, 1.0).unwrap(),
        osm_tags: Default::default(),
        category: sc(c),
        image_paths: [(Provenance::Osm, "o.png".to_string()), (Provenance::Satellite, "s.png".to_string())].into(),
        sources: [(SourceKind::Website, SourceRecord { locator: "https://x.org".into(), text: None, truncated: false })].into(),
    }
}

fn record(id: u64, label: Label, pipeline: Pipeline, clues: Vec<ClueText>) -> InferenceRecord {
    InferenceRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        entry_id: id,
        pipeline,
        config: InputConfiguration::All,
        template: PromptTemplate::SIMPLE_TEXT,
        model_id: "m".into(),
        clues,
        prediction: Some(Prediction { label, explanation: None, raw: label.to_string() }),
        failure: None,
        calls: vec![],
        latency_ms: 0,
        usage: Usage::default(),
    }
}

fn parse_label(s: &str) -> Label {
    s.parse().unwrap()
}

// Generated once with a seeded script; expected values from scikit-learn
// (labels = sections present in y_true, zero_division = 0).
const FIXTURE_40: &str = "A:A B:B C:C D:D E:E F:F G:UNK H:H I:I J:J K:K L:L M:D N:T O:VIOLATION P:S Q:UNK R:R S:S U:UNK \
C:C C:UNK E:UNK C:C D:D B:UNK D:UNK G:O H:H D:H B:UNK H:O E:VIOLATION B:B G:G F:F H:H B:S F:F F:UNK";

#[test]
fn forty_record_fixture_matches_reference_scorer() {
    let tax = Taxonomy::builtin();
    let pairs: Vec<(char, Label)> = FIXTURE_40
        .split_whitespace()
        .map(|p| {
            let (t, l) = p.split_once(':').unwrap();
            (t.chars().next().unwrap(), parse_label(l))
        })
        .collect();
    let mut ds = Dataset::new("f", "1", "t");
    ds.entries = pairs.iter().enumerate().map(|(i, (t, _))| entry(i as u64, *t)).collect();
    let recs: Vec<_> = pairs.iter().enumerate().map(|(i, (_, l))| record(i as u64, *l, Pipeline::ZeroShot, vec![])).collect();
    let rep = score(&recs, &ds, &tax).unwrap();
    let close = |a: &Q, b: f64| (a.to_f64().unwrap() - b).abs() < 1e-12;
    assert!(close(&rep.accuracy, 0.55));
    assert_eq!(rep.unknown, 9);
    assert!(close(&rep.macro_avg.precision, 0.6375));
    assert!(close(&rep.macro_avg.recall, 0.5408333333333333));
    assert!(close(&rep.macro_avg.f1, 0.5553571428571429));
    assert!(close(&rep.weighted_avg.precision, 0.7749999999999999));
    assert!(close(&rep.weighted_avg.recall, 0.55));
    assert!(close(&rep.weighted_avg.f1, 0.6125));
    assert_eq!(rep.per_class.len(), 20);
    assert!(rep.confusion[SectionCode::T.index()].iter().all(|n| *n == 0));
}

#[test]
fn report_renders_worked_example() {
    let tax = Taxonomy::builtin();
    let mut ds = Dataset::new("f", "1", "t");
    ds.entries = vec![entry(1, 'K')];
    let rec = record(1, Label::Section(sc('G')), Pipeline::MultiTurn, worked_example_clues());
    let rep = score(&[rec], &ds, &tax).unwrap();
    let text = rep.to_string();
    assert!(text.contains("v_g=[0, 0, 1, 1, 0]"), "{text}");
    assert!(text.contains("v_p=[12/13, 1/3, 0, 0, 0]"), "{text}");
    let json = rep.to_json();
    assert_eq!(json["projections"][0]["v_g"], serde_json::json!(["0", "0", "1", "1", "0"]));
    assert_eq!(json["sources"]["osm"]["exact"]["effectiveness"], "12/13");
    assert_eq!(json["sources"]["website"]["information_discovery"], 0.0);
}

fn arb_keywords() -> impl Strategy<Value = Vec<(String, SectionCode)>> {
    prop::collection::vec((0usize..21).prop_map(|i| ("k".to_string(), SectionCode::from_index(i).unwrap())), 0..40)
}

fn arb_profile() -> impl Strategy<Value = ClueProfile> {
    prop::collection::btree_map(prop::sample::select(ClueSource::ALL.to_vec()), arb_keywords(), 0..=5)
        .prop_map(|m| ClueProfile { vectors: m.into_iter().map(|(s, k)| (s, frequency_vector(&k))).collect() })
}

proptest! {
    #[test]
    fn vector_sums_are_zero_or_one(kws in arb_keywords()) {
        let s = frequency_vector(&kws).sum();
        prop_assert!(s == r(1, 1) || (kws.is_empty() && s.is_zero()));
    }

    #[test]
    fn duplication_is_scale_invariant(kws in arb_keywords(), k in 1usize..5) {
        let dup: Vec<_> = kws.iter().flat_map(|x| std::iter::repeat_n(x.clone(), k)).collect();
        prop_assert_eq!(frequency_vector(&kws).values(), frequency_vector(&dup).values());
    }

    #[test]
    fn projection_components_are_local(p in arb_profile(), other in arb_keywords(), li in 0usize..21, si in 0usize..5) {
        let label = SectionCode::from_index(li).unwrap();
        let zero = project(&ClueProfile::default(), label, ProjectionKind::GroundTruth);
        prop_assert!(zero.values.iter().all(Zero::is_zero));
        let base = project(&p, label, ProjectionKind::GroundTruth);
        let changed_source = ClueSource::ALL[si];
        let mut q = p.clone();
        q.vectors.insert(changed_source, frequency_vector(&other));
        let after = project(&q, label, ProjectionKind::GroundTruth);
        for s in ClueSource::ALL {
            if s != changed_source {
                prop_assert_eq!(base.get(s), after.get(s));
            }
        }
    }

    #[test]
    fn single_inference_metrics_equal_components(p in arb_profile(), li in 0usize..21) {
        let label = SectionCode::from_index(li).unwrap();
        let v = project(&p, label, ProjectionKind::GroundTruth);
        let c = correctness(std::slice::from_ref(&v), &[1; 5]);
        for s in ClueSource::ALL {
            prop_assert_eq!(c[s.index()].as_ref().unwrap(), v.get(s));
        }
    }

    #[test]
    fn information_discovery_complements(i in 1u64..1000, frac in 0.0f64..=1.0) {
        let nei = (i as f64 * frac) as u64;
        let id = information_discovery(nei, i).unwrap();
        prop_assert_eq!(id + r(nei as i64, i as i64), r(1, 1));
    }

    #[test]
    fn accuracy_is_trace_without_unknowns(pairs in prop::collection::vec((0usize..20, 0usize..21), 1..60)) {
        let tax = Taxonomy::builtin();
        let observable: Vec<SectionCode> = SectionCode::observable().collect();
        let mut ds = Dataset::new("f", "1", "t");
        ds.entries = pairs.iter().enumerate().map(|(i, (t, _))| entry(i as u64, observable[*t].letter())).collect();
        let recs: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(i, (_, p))| record(i as u64, Label::Section(SectionCode::from_index(*p).unwrap()), Pipeline::ZeroShot, vec![]))
            .collect();
        let rep = score(&recs, &ds, &tax).unwrap();
        let trace: u64 = (0..21).map(|i| rep.confusion[i][i]).sum();
        prop_assert_eq!(rep.accuracy, r(trace as i64, pairs.len() as i64));
    }
}

#[test]
fn extraction_keeps_multiplicity() {
    let tax = Taxonomy::builtin();
    let (kws, _) = extract_keywords("[retail] a [retail] b [trade] c", &tax);
    assert_eq!(kws.len(), 3);
    let v: FrequencyVector = frequency_vector(&kws);
    assert_eq!(v.get(sc('G')), r(1, 1));
}
