use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nacekit::corpus::ElementType;
use nacekit::datasetio::{leak_scan, summarize, Dataset, DatasetEntry, DatasetError, SourceRecord, ENTRIES_FILE};
use nacekit::geotile::{BBox, Provenance};
use nacekit::sources::{attach_sources, SourceDocument, SourceKind, SourceRef};
use nacekit::taxonomy::{SectionCode, Taxonomy};
use proptest::prelude::*;

fn fixture_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/heim"))
}

fn entry(id: u64, code: char, kinds: &[SourceKind]) -> DatasetEntry {
    DatasetEntry {
        id,
        element_type: ElementType::Node,
        name: format!("Entity {id}"),
        bbox: BBox::new(12.0, 50.0, 12.001, 50.001).unwrap(),
        osm_tags: [("shop".to_string(), "bakery".to_string())].into(),
        category: SectionCode::from_letter(code).unwrap(),
        image_paths: [
            (Provenance::Osm, format!("images/{id}_osm.png")),
            (Provenance::Satellite, format!("images/{id}_satellite.png")),
        ]
        .into(),
        sources: kinds
            .iter()
            .map(|k| (*k, SourceRecord { locator: format!("loc-{k}"), text: Some(format!("text {id}")), truncated: false }))
            .collect(),
    }
}

fn dataset(entries: Vec<DatasetEntry>) -> Dataset {
    let mut d = Dataset::new("t", "1", "2025-01-01T00:00:00Z");
    d.entries = entries;
    d
}

#[test]
fn heim_fixture_loads() {
    let tax = Taxonomy::builtin();
    let d = Dataset::read(fixture_dir(), &tax).unwrap();
    assert_eq!(d.entries.len(), 1);
    let e = &d.entries[0];
    assert_eq!(e.category, SectionCode::from_letter('B').unwrap());
    assert_eq!(e.osm_tags.len(), 8);
    assert_eq!(e.element_type, ElementType::Way);
    assert_eq!(e.bbox.to_array(), [12.4893727, 50.9761359, 12.5089029, 50.9916218]);
    assert_eq!(e.sources.keys().copied().collect::<Vec<_>>(), [SourceKind::Website]);
    assert!(e.sources[&SourceKind::Website].text.is_none());
}

#[test]
fn heim_fixture_rewrites_byte_identical() {
    let tax = Taxonomy::builtin();
    let d = Dataset::read(fixture_dir(), &tax).unwrap();
    let original = fs::read(fixture_dir().join(ENTRIES_FILE)).unwrap();
    assert_eq!(d.entries_bytes(), original);
}

#[test]
fn write_read_round_trip_and_determinism() {
    let tax = Taxonomy::builtin();
    let d = dataset(vec![
        entry(1, 'C', &[SourceKind::Website]),
        entry(2, 'K', &[SourceKind::Wikidata, SourceKind::Wikipedia]),
    ]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    d.write(a.path(), &tax).unwrap();
    d.write(b.path(), &tax).unwrap();
    assert_eq!(fs::read(a.path().join(ENTRIES_FILE)).unwrap(), fs::read(b.path().join(ENTRIES_FILE)).unwrap());
    let back = Dataset::read(a.path(), &tax).unwrap();
    assert_eq!(back.entries, d.entries);
    assert_eq!(back.manifest.entry_count, 2);
}

fn rejects(mutate: impl FnOnce(&mut DatasetEntry)) -> DatasetError {
    let mut e = entry(7, 'C', &[SourceKind::Website]);
    mutate(&mut e);
    let dir = tempfile::tempdir().unwrap();
    dataset(vec![e]).write(dir.path(), &Taxonomy::builtin()).unwrap_err()
}

#[test]
fn every_entry_invariant_is_rejected() {
    assert!(matches!(rejects(|e| e.name = " ".into()), DatasetError::Invalid { field: "name", .. }));
    assert!(matches!(rejects(|e| e.category = SectionCode::T), DatasetError::Invalid { field: "category", .. }));
    assert!(matches!(
        rejects(|e| {
            e.image_paths.remove(&Provenance::Satellite);
        }),
        DatasetError::Invalid { field: "image_paths", .. }
    ));
    assert!(matches!(rejects(|e| e.sources.clear()), DatasetError::Invalid { field: "sources", .. }));
    let leak = rejects(|e| {
        e.category = SectionCode::from_letter('B').unwrap();
        e.sources.get_mut(&SourceKind::Website).unwrap().text = Some("We are listed under NACE section B.".into());
    });
    assert!(matches!(leak, DatasetError::Leak { id: 7, kind: SourceKind::Website, .. }));
}

#[test]
fn duplicate_ids_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = dataset(vec![entry(1, 'C', &[SourceKind::Website]), entry(1, 'G', &[SourceKind::Website])])
        .write(dir.path(), &Taxonomy::builtin())
        .unwrap_err();
    assert!(matches!(err, DatasetError::DuplicateId(1)));
}

#[test]
fn missing_name_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture_dir().join("manifest.json"), dir.path().join("manifest.json")).unwrap();
    let line = fs::read_to_string(fixture_dir().join(ENTRIES_FILE)).unwrap().replace("\"name\":\"Heim Kieswerk\",", "");
    fs::write(dir.path().join(ENTRIES_FILE), line).unwrap();
    match Dataset::read(dir.path(), &Taxonomy::builtin()).unwrap_err() {
        DatasetError::Schema { line: 1, reason, .. } => {
            assert!(reason.contains("122563530"), "{reason}");
            assert!(reason.contains("name"), "{reason}");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn leak_scan_patterns() {
    let tax = Taxonomy::builtin();
    let mut e = entry(3, 'K', &[SourceKind::Website]);
    let mut set = |text: &str| {
        e.sources.get_mut(&SourceKind::Website).unwrap().text = Some(text.into());
        leak_scan(&e, &tax).len()
    };
    assert_eq!(set("Statistical class: nace 64.19"), 1);
    assert_eq!(set("Classified in Section K (financial and insurance activities)."), 1);
    assert_eq!(set("See section K of the building plan."), 0);
    assert_eq!(set("Section B: mining services"), 0);
    assert_eq!(set("We offer loans and insurance."), 0);
}

#[test]
fn summary_of_three_entries() {
    let d = dataset(vec![
        entry(1, 'C', &[SourceKind::Website]),
        entry(2, 'C', &[SourceKind::Wikidata, SourceKind::Website]),
        entry(3, 'K', &[SourceKind::Wikidata, SourceKind::Wikipedia, SourceKind::Website]),
    ]);
    let s = summarize(&d);
    assert_eq!(s.total, 3);
    assert_eq!(s.entries_per_section.len(), 20);
    assert_eq!(s.entries_per_section[&SectionCode::from_letter('C').unwrap()], 2);
    let c = s.mean_resources[&SectionCode::from_letter('C').unwrap()];
    // C: wikidata in 1 of 2 entries, website in both, no wikipedia.
    assert_eq!((c.osm_image, c.satellite_image, c.wikidata, c.wikipedia, c.website), (1.0, 1.0, 0.5, 0.0, 1.0));
    let k = s.mean_resources[&SectionCode::from_letter('K').unwrap()];
    assert_eq!((k.wikidata, k.wikipedia, k.website), (1.0, 1.0, 1.0));
    assert_eq!(s.histogram.total(), 3);
    assert_eq!(s.histogram.counts.len(), 3);
}

#[test]
fn summary_of_empty_dataset() {
    let s = summarize(&dataset(vec![]));
    assert_eq!(s.total, 0);
    assert!(s.entries_per_section.values().all(|n| *n == 0));
    assert!(s.mean_resources.values().all(|m| m.website == 0.0 && m.osm_image == 0.0));
}

#[test]
fn balanced_summary() {
    let mut entries = Vec::new();
    for (i, code) in SectionCode::observable().enumerate() {
        for j in 0..50 {
            entries.push(entry((i * 100 + j) as u64, code.letter(), &[SourceKind::Website]));
        }
    }
    let s = summarize(&dataset(entries));
    assert_eq!(s.total, 1000);
    assert!(s.entries_per_section.values().all(|n| *n == 50));
}

fn doc(kind: SourceKind, locator: &str) -> SourceDocument {
    SourceDocument {
        source_ref: SourceRef::new(kind, locator).unwrap(),
        text: "t".into(),
        retrieved_at: chrono::DateTime::UNIX_EPOCH,
        truncated: false,
    }
}

#[test]
fn attach_sources_cases() {
    let base = || {
        let mut e = entry(9, 'B', &[]);
        e.sources = BTreeMap::new();
        e
    };
    let (e, flagged) = attach_sources(base(), &[doc(SourceKind::Website, "https://www.heim-gruppe.de")]);
    assert!(!flagged);
    assert_eq!(e.sources.len(), 1);
    let (_, flagged) = attach_sources(base(), &[]);
    assert!(flagged);
    let (e, _) = attach_sources(
        base(),
        &[doc(SourceKind::Wikidata, "Q1"), doc(SourceKind::Wikipedia, "en:X"), doc(SourceKind::Website, "https://x.org")],
    );
    assert_eq!(e.sources.len(), 3);
}

fn arb_entry() -> impl Strategy<Value = DatasetEntry> {
    (
        any::<u64>(),
        prop::sample::select(SectionCode::observable().collect::<Vec<_>>()),
        "[A-Za-z][A-Za-z ]{0,20}",
        (-179.0f64..179.0, -80.0f64..80.0, 0.0f64..0.5, 0.0f64..0.5),
        prop::collection::btree_map("[a-z:]{1,10}", "[^\u{0}]{1,12}", 0..5),
        prop::collection::btree_set(prop::sample::select(SourceKind::ALL.to_vec()), 1..=3),
        prop::option::of("[a-zA-Z0-9 .,]{0,40}"),
    )
        .prop_map(|(id, category, name, (lon, lat, dlon, dlat), osm_tags, kinds, text)| DatasetEntry {
            id,
            element_type: ElementType::Way,
            name,
            bbox: BBox::new(lon, lat, lon + dlon, lat + dlat).unwrap(),
            osm_tags,
            category,
            image_paths: [(Provenance::Osm, "a.png".to_string()), (Provenance::Satellite, "b.png".to_string())].into(),
            sources: kinds
                .into_iter()
                .map(|k| (k, SourceRecord { locator: "x".into(), text: text.clone(), truncated: text.is_some() }))
                .collect(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn read_inverts_write(entries in prop::collection::vec(arb_entry(), 0..6)) {
        let mut seen = std::collections::BTreeSet::new();
        let entries: Vec<_> = entries.into_iter().filter(|e| seen.insert(e.id)).collect();
        let tax = Taxonomy::builtin();
        let d = dataset(entries);
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path(), &tax).unwrap();
        let back = Dataset::read(dir.path(), &tax).unwrap();
        prop_assert_eq!(back.entries, d.entries);
    }
}
