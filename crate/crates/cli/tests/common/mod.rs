//! Offline fixture: an element stream covering every observable section, a
//! recorded response store for tiles and websites, and scripted gateway
//! transcripts for both pipelines.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgba, RgbaImage};
use nacekit::corpus::{ElementType, OsmElement};
use nacekit::fetch::{Response, ResponseStore};
use nacekit::geotile::{plan, BBox, TileProvider, ZoomPolicy};
use nacekit::inference::NO_EVIDENCE_SENTINEL;
use nacekit::sources::{SourceKind, SourceRef};
use nacekit::taxonomy::{SectionCode, Taxonomy};

pub const PER_SECTION_POOL: u64 = 3;

pub const ACTIVITY_TAGS: [(char, &str, &str); 20] = [
    ('A', "landuse", "farmland"),
    ('B', "landuse", "quarry"),
    ('C', "man_made", "works"),
    ('D', "power", "plant"),
    ('E', "man_made", "wastewater_plant"),
    ('F', "craft", "builder"),
    ('G', "landuse", "retail"),
    ('H', "aeroway", "aerodrome"),
    ('I', "tourism", "hotel"),
    ('J', "office", "telecommunication"),
    ('K', "office", "financial"),
    ('L', "office", "estate_agent"),
    ('M', "office", "lawyer"),
    ('N', "office", "employment_agency"),
    ('O', "office", "government"),
    ('P', "amenity", "school"),
    ('Q', "amenity", "hospital"),
    ('R', "leisure", "sports_centre"),
    ('S', "shop", "hairdresser"),
    ('U', "office", "diplomatic"),
];

/// Scripted zero-shot answers by section: 14 correct, 3 UNK, 2 wrong and
/// 1 instruction violation.
pub fn zero_shot_answer(section: char) -> String {
    match section {
        'G' | 'M' | 'R' => "UNK".into(),
        'E' => "D".into(),
        'J' => "M".into(),
        'P' => "I think this is P".into(),
        'A' => "\"A\"".into(),
        c => c.to_string(),
    }
}

/// Scripted decision answers: 18 correct and 2 UNK.
pub fn decision_answer(section: char) -> String {
    match section {
        'A' | 'B' => "UNK".into(),
        c => format!(" {c}\n"),
    }
}

pub fn osm_provider() -> TileProvider {
    TileProvider {
        name: "osm_fixture".into(),
        url_template: "http://tiles.test/osm/{z}/{x}/{y}.png".into(),
        max_parallel: 4,
        politeness_delay_ms: 0,
        attribution: "fixture map".into(),
    }
}

pub fn satellite_provider() -> TileProvider {
    TileProvider {
        name: "sat_fixture".into(),
        url_template: "http://tiles.test/sat/{z}/{y}/{x}.png".into(),
        max_parallel: 4,
        politeness_delay_ms: 0,
        attribution: "fixture imagery".into(),
    }
}

pub struct Fixture {
    pub root: PathBuf,
    pub elements: PathBuf,
    pub store: PathBuf,
    pub config: PathBuf,
    pub zero_shot_transcripts: PathBuf,
    pub multi_turn_transcripts: PathBuf,
    pub elements_by_section: Vec<(SectionCode, Vec<u64>)>,
}

fn png(color: [u8; 4]) -> Vec<u8> {
    let img = RgbaImage::from_pixel(256, 256, Rgba(color));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn ok(content_type: &str, body: Vec<u8>) -> Response {
    Response { status: 200, content_type: Some(content_type.into()), body, latency_ms: 0 }
}

pub fn website(section: char, j: u64) -> String {
    format!("https://site-{}{j}.example.org/", section.to_ascii_lowercase())
}

fn transcript_line(key: String, content: &str) -> String {
    let line = serde_json::json!({
        "key": key,
        "content": content,
        "usage": {"prompt_tokens": 100, "completion_tokens": 5},
        "latency_ms": 7,
    });
    format!("{line}\n")
}

/// Lay the fixture out under `root`.
pub fn write_fixture(root: &Path) -> Fixture {
    let tax = Taxonomy::builtin();
    let store_dir = root.join("store");
    let store = ResponseStore::new(&store_dir);
    let osm = osm_provider();
    let sat = satellite_provider();
    let (osm_png, sat_png) = (png([230, 220, 200, 255]), png([40, 90, 40, 255]));

    let mut lines = String::new();
    let mut zero = String::new();
    let mut multi = String::new();
    let mut by_section = Vec::new();
    for (k, (letter, key, value)) in ACTIVITY_TAGS.iter().enumerate() {
        let section = SectionCode::from_letter(*letter).unwrap();
        let mut ids = Vec::new();
        for j in 0..PER_SECTION_POOL {
            let id = 1000 * (k as u64 + 1) + j;
            ids.push(id);
            let lon = 10.0 + k as f64 * 0.05;
            let lat = 50.0 + j as f64 * 0.05;
            let url = website(*letter, j);
            let tags = [
                ("name", format!("Site {letter}{j}")),
                (*key, value.to_string()),
                ("addr:city", "Testville".to_string()),
                ("website", url.clone()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            let el = OsmElement { id, element_type: ElementType::Node, tags, bbox: BBox::point(lon, lat).unwrap() };
            lines.push_str(&serde_json::to_string(&el).unwrap());
            lines.push('\n');

            let locator = SourceRef::new(SourceKind::Website, &url).unwrap().locator;
            // One candidate serves a document that is not HTML.
            let response = if *letter == 'C' && j == 2 {
                ok("application/pdf", b"%PDF-1.4".to_vec())
            } else {
                let html = format!(
                    "<html><head><title>x</title></head><body><nav>Menu</nav><h1>Site {letter}{j}</h1>\
                     <p>Local business in Testville.</p><footer>Imprint</footer></body></html>"
                );
                ok("text/html; charset=utf-8", html.into_bytes())
            };
            store.put("website", &locator, &response).unwrap();

            let grid = plan(&el.bbox, &ZoomPolicy::default(), 256).unwrap();
            for tile in grid.tiles() {
                store.put(&osm.store_kind(), &osm.url_for(tile), &ok("image/png", osm_png.clone())).unwrap();
                store.put(&sat.store_kind(), &sat.url_for(tile), &ok("image/png", sat_png.clone())).unwrap();
            }

            zero.push_str(&transcript_line(format!("{id}/zero_shot"), &zero_shot_answer(*letter)));
            let kw = &tax.section(section).keywords[0];
            multi.push_str(&transcript_line(format!("{id}/clue_osm"), &format!("Economic activity clues:\n- [{kw}] mapped feature")));
            multi.push_str(&transcript_line(format!("{id}/clue_satellite"), NO_EVIDENCE_SENTINEL));
            let web = if *letter == 'K' { NO_EVIDENCE_SENTINEL.to_string() } else { format!("- [{kw}] described on the site") };
            multi.push_str(&transcript_line(format!("{id}/clue_website"), &web));
            multi.push_str(&transcript_line(format!("{id}/decision"), &decision_answer(*letter)));
        }
        by_section.push((section, ids));
    }

    let elements = root.join("elements.jsonl");
    fs::write(&elements, lines).unwrap();
    let zero_dir = root.join("transcripts-zero-shot");
    let multi_dir = root.join("transcripts-multi-turn");
    fs::create_dir_all(&zero_dir).unwrap();
    fs::create_dir_all(&multi_dir).unwrap();
    fs::write(zero_dir.join("transcripts.jsonl"), zero).unwrap();
    fs::write(multi_dir.join("transcripts.jsonl"), multi).unwrap();

    let config = root.join("nacekit.toml");
    let provider_toml = |p: &TileProvider| {
        format!(
            "name = \"{}\"\nurl_template = \"{}\"\nmax_parallel = {}\nattribution = \"{}\"\n",
            p.name, p.url_template, p.max_parallel, p.attribution
        )
    };
    fs::write(
        &config,
        format!(
            "contact = \"fixture@example.org\"\nretry_base_delay_ms = 1\n\n[gateway]\nmodel = \"scripted\"\n\n\
             [build]\ndataset_name = \"fixture\"\n\n[tiles.osm]\n{}\n[tiles.satellite]\n{}",
            provider_toml(&osm),
            provider_toml(&sat)
        ),
    )
    .unwrap();

    Fixture {
        root: root.to_path_buf(),
        elements,
        store: store_dir,
        config,
        zero_shot_transcripts: zero_dir,
        multi_turn_transcripts: multi_dir,
        elements_by_section: by_section,
    }
}

/// Run the built binary with a clean environment.
pub fn nacekit(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nacekit"));
    for (k, _) in std::env::vars() {
        if k.starts_with("NACEKIT_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("binary runs")
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}
