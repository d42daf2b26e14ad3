//! Browser bindings: tile planning, clue projection vectors and answer
//! parsing, each taking and returning JSON strings.

use nacekit::cluemetrics::{fmt_exact, project, ClueProfile, ProjectionKind};
use nacekit::geotile::{plan, BBox, ZoomPolicy, DEFAULT_TILE_PX};
use nacekit::inference::{parse_prediction, ClueSource, ClueText, OutputMode};
use nacekit::taxonomy::{SectionCode, Taxonomy};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Zoom and covering grid for a bbox under the dynamic zoom rule.
pub fn tile_plan_json(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64, max_tiles: u32) -> Result<String, String> {
    let bbox = BBox::new(min_lon, min_lat, max_lon, max_lat).map_err(|e| e.to_string())?;
    let policy = ZoomPolicy { max_tiles, ..ZoomPolicy::default() };
    let grid = plan(&bbox, &policy, DEFAULT_TILE_PX).map_err(|e| e.to_string())?;
    let tiles: Vec<Value> = grid.tiles().map(|t| json!([t.z, t.x, t.y])).collect();
    Ok(json!({
        "zoom": grid.z,
        "cols": grid.cols(),
        "rows": grid.rows(),
        "width_px": grid.width_px(),
        "height_px": grid.height_px(),
        "bounds": grid.bounds().to_array(),
        "tiles": tiles,
    })
    .to_string())
}

/// `clues` maps source names (osm, satellite, wikidata, wikipedia, website)
/// to clue texts.
pub fn clue_vectors_json(clues: &str, truth: &str, predicted: &str) -> Result<String, String> {
    let map: serde_json::Map<String, Value> = serde_json::from_str(clues).map_err(|e| e.to_string())?;
    let mut texts = Vec::new();
    for (name, text) in map {
        let source = ClueSource::ALL
            .into_iter()
            .find(|s| s.as_str() == name)
            .ok_or_else(|| format!("unknown source {name:?}"))?;
        let text = text.as_str().ok_or_else(|| format!("clue for {name} is not a string"))?;
        texts.push(ClueText { source, text: text.to_string() });
    }
    let section = |s: &str| s.trim().parse::<SectionCode>().map_err(|e| e.to_string());
    let (truth, predicted) = (section(truth)?, section(predicted)?);
    let tax = Taxonomy::builtin();
    let (profile, diagnostics) = ClueProfile::from_clues(&texts, &tax);
    let render = |kind, label| -> Vec<String> { project(&profile, label, kind).values.iter().map(fmt_exact).collect() };
    Ok(json!({
        "sources": ClueSource::ALL.map(|s| s.as_str()),
        "v_g": render(ProjectionKind::GroundTruth, truth),
        "v_p": render(ProjectionKind::Prediction, predicted),
        "diagnostics": diagnostics,
    })
    .to_string())
}

pub fn parse_answer_json(raw: &str, mode: &str) -> Result<String, String> {
    let mode: OutputMode = mode.parse()?;
    let p = parse_prediction(raw, mode);
    Ok(json!({ "label": p.label.to_string(), "explanation": p.explanation }).to_string())
}

#[wasm_bindgen]
pub fn tile_plan(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64, max_tiles: u32) -> Result<String, JsError> {
    tile_plan_json(min_lon, min_lat, max_lon, max_lat, max_tiles).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn clue_vectors(clues: &str, truth: &str, predicted: &str) -> Result<String, JsError> {
    clue_vectors_json(clues, truth, predicted).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn parse_answer(raw: &str, mode: &str) -> Result<String, JsError> {
    parse_answer_json(raw, mode).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_for_point() {
        let v: Value = serde_json::from_str(&tile_plan_json(12.5, 50.98, 12.5, 50.98, 4).unwrap()).unwrap();
        assert!(v["cols"].as_u64().unwrap() <= 4);
        assert_eq!(v["tiles"].as_array().unwrap().len() as u64, v["cols"].as_u64().unwrap() * v["rows"].as_u64().unwrap());
    }

    #[test]
    fn worked_example_vectors() {
        let clues = json!({
            "osm": format!("{}[transport]", "[retail] ".repeat(12)),
            "satellite": "[accommodation] [retail] [transport]",
            "wikidata": "[insurance]",
            "wikipedia": "[finance]",
            "website": "No economic activity clues found.",
        });
        let v: Value = serde_json::from_str(&clue_vectors_json(&clues.to_string(), "K", "G").unwrap()).unwrap();
        assert_eq!(v["v_g"], json!(["0", "0", "1", "1", "0"]));
        assert_eq!(v["v_p"], json!(["12/13", "1/3", "0", "0", "0"]));
    }

    #[test]
    fn answers() {
        assert!(parse_answer_json(" b ", "text").unwrap().contains("\"B\""));
        assert!(parse_answer_json("{\"EXPLANATION\": \"x\", \"LLM_RESPONSE\": \"UNK\"}", "json").unwrap().contains("UNK"));
        assert!(parse_answer_json("x", "yaml").is_err());
    }
}
