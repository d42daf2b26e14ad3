//! Layered run configuration: built-in defaults, then environment, then the
//! TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nacekit::fetch::FetchMode;
use nacekit::geotile::{TileProvider, ZoomPolicy, DEFAULT_TILE_PX};
use nacekit::inference::{InputConfiguration, OutputMode, Pipeline, PromptTemplate, PromptVariant, CLUE_MAX_TOKENS};
use nacekit::sources::DEFAULT_BUDGET_CHARS;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable holding the gateway credential. Its value is never
/// copied into [`Effective`].
pub const API_KEY_ENV: &str = "NACEKIT_API_KEY";

const ENV_VARS: [(&str, &str); 6] = [
    ("NACEKIT_WORKERS", "workers"),
    ("NACEKIT_SEED", "seed"),
    ("NACEKIT_ENDPOINT", "gateway.endpoint"),
    ("NACEKIT_MODEL", "gateway.model"),
    ("NACEKIT_CONTACT", "contact"),
    ("NACEKIT_TIMEOUT_SECS", "timeout_secs"),
];

/// One configuration layer. Every field is optional so layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layer {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    /// Contact address sent in the user agent of live requests.
    pub contact: Option<String>,
    pub timeout_secs: Option<u64>,
    pub retry_attempts: Option<u32>,
    pub retry_base_delay_ms: Option<u64>,
    pub gateway: GatewayLayer,
    pub classify: ClassifyLayer,
    pub build: BuildLayer,
    pub tiles: TilesLayer,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayLayer {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f32>,
    pub max_tokens: Option<u32>,
    pub clue_max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyLayer {
    pub pipeline: Option<String>,
    pub inputs: Option<String>,
    pub variant: Option<String>,
    pub output_mode: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildLayer {
    pub per_section: Option<usize>,
    pub budget_chars: Option<usize>,
    pub dataset_name: Option<String>,
    pub dataset_version: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilesLayer {
    pub tile_px: Option<u32>,
    pub max_tiles: Option<u32>,
    pub min_zoom: Option<u8>,
    pub max_zoom: Option<u8>,
    pub osm: Option<TileProvider>,
    pub satellite: Option<TileProvider>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),+) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )+
    };
}

impl Layer {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Values taken from `NACEKIT_*` variables via `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let mut layer = Layer::default();
        for (var, field) in ENV_VARS {
            let Some(value) = lookup(var).filter(|v| !v.trim().is_empty()) else { continue };
            let bad = || format!("{var}={value:?} is not valid for {field}");
            match field {
                "workers" => layer.workers = Some(value.trim().parse().with_context(bad)?),
                "seed" => layer.seed = Some(value.trim().parse().with_context(bad)?),
                "gateway.endpoint" => layer.gateway.endpoint = Some(value),
                "gateway.model" => layer.gateway.model = Some(value),
                "contact" => layer.contact = Some(value),
                "timeout_secs" => layer.timeout_secs = Some(value.trim().parse().with_context(bad)?),
                _ => unreachable!(),
            }
        }
        Ok(layer)
    }

    /// `top` wins wherever it sets a value.
    pub fn overlay(mut self, top: &Layer) -> Self {
        overlay!(self, top, workers, seed, contact, timeout_secs, retry_attempts, retry_base_delay_ms);
        overlay!(self.gateway, top.gateway, endpoint, model, temperature, max_tokens, clue_max_tokens);
        overlay!(self.classify, top.classify, pipeline, inputs, variant, output_mode);
        overlay!(self.build, top.build, per_section, budget_chars, dataset_name, dataset_version);
        overlay!(self.tiles, top.tiles, tile_px, max_tiles, min_zoom, max_zoom, osm, satellite);
        self
    }
}

/// Where network traffic goes for this run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FetchSetup {
    pub mode: FetchMode,
    pub store: Option<PathBuf>,
}

/// Fully resolved configuration; echoed into every run manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub workers: usize,
    pub seed: u64,
    pub contact: Option<String>,
    pub timeout_secs: u64,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
    pub fetch: FetchSetup,
    pub endpoint: String,
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
    pub clue_max_tokens: u32,
    pub pipeline: Pipeline,
    pub inputs: InputConfiguration,
    pub template: PromptTemplate,
    pub per_section: usize,
    pub budget_chars: usize,
    pub dataset_name: String,
    pub dataset_version: String,
    pub tile_px: u32,
    pub zoom: ZoomPolicy,
    pub osm_tiles: TileProvider,
    pub satellite_tiles: TileProvider,
}

pub fn default_osm_provider() -> TileProvider {
    TileProvider {
        name: "osm".into(),
        url_template: "https://tile.openstreetmap.org/{z}/{x}/{y}.png".into(),
        max_parallel: 2,
        politeness_delay_ms: 100,
        attribution: "© OpenStreetMap contributors".into(),
    }
}

pub fn default_satellite_provider() -> TileProvider {
    TileProvider {
        name: "esri_world_imagery".into(),
        url_template: "https://server.arcgisonline.com/ArcGIS/rest/services/World_Imagery/MapServer/tile/{z}/{y}/{x}"
            .into(),
        max_parallel: 2,
        politeness_delay_ms: 100,
        attribution: "Esri, Maxar, Earthstar Geographics".into(),
    }
}

impl Effective {
    pub fn resolve(layer: &Layer, fetch: FetchSetup) -> anyhow::Result<Self> {
        let zoom_default = ZoomPolicy::default();
        let zoom = ZoomPolicy {
            max_tiles: layer.tiles.max_tiles.unwrap_or(zoom_default.max_tiles),
            min_zoom: layer.tiles.min_zoom.unwrap_or(zoom_default.min_zoom),
            max_zoom: layer.tiles.max_zoom.unwrap_or(zoom_default.max_zoom),
        };
        if zoom.min_zoom > zoom.max_zoom || zoom.max_tiles == 0 {
            bail!("invalid zoom policy {zoom:?}");
        }
        fn set(v: &Option<String>) -> Option<&str> {
            v.as_deref().map(str::trim).filter(|s| !s.is_empty())
        }
        let pipeline = match set(&layer.classify.pipeline) {
            Some(s) => s.parse().map_err(anyhow::Error::msg)?,
            None => Pipeline::ZeroShot,
        };
        let inputs = match set(&layer.classify.inputs) {
            Some(s) => s.parse().map_err(anyhow::Error::msg)?,
            None => InputConfiguration::All,
        };
        let variant: PromptVariant = match set(&layer.classify.variant) {
            Some(s) => s.parse().map_err(anyhow::Error::msg)?,
            None => PromptVariant::Simple,
        };
        let output_mode: OutputMode = match set(&layer.classify.output_mode) {
            Some(s) => s.parse().map_err(anyhow::Error::msg)?,
            None => OutputMode::Text,
        };
        let osm_tiles = layer.tiles.osm.clone().unwrap_or_else(default_osm_provider);
        let satellite_tiles = layer.tiles.satellite.clone().unwrap_or_else(default_satellite_provider);
        osm_tiles.validate()?;
        satellite_tiles.validate()?;
        if fetch.mode != FetchMode::Live && fetch.store.is_none() {
            bail!("{:?} mode needs a store directory", fetch.mode);
        }
        Ok(Effective {
            workers: layer.workers.unwrap_or(1).max(1),
            seed: layer.seed.unwrap_or(0),
            contact: layer.contact.clone(),
            timeout_secs: layer.timeout_secs.unwrap_or(60),
            retry_attempts: layer.retry_attempts.unwrap_or(3).max(1),
            retry_base_delay_ms: layer.retry_base_delay_ms.unwrap_or(500),
            fetch,
            endpoint: layer
                .gateway
                .endpoint
                .clone()
                .unwrap_or_else(|| "http://localhost:8000/v1/chat/completions".into()),
            model: layer.gateway.model.clone().unwrap_or_else(|| "default".into()),
            temperature: layer.gateway.temperature.unwrap_or(0.0),
            max_tokens: layer.gateway.max_tokens.unwrap_or(512),
            clue_max_tokens: layer.gateway.clue_max_tokens.unwrap_or(CLUE_MAX_TOKENS),
            pipeline,
            inputs,
            template: PromptTemplate { variant, output_mode },
            per_section: layer.build.per_section.unwrap_or(50),
            budget_chars: layer.build.budget_chars.unwrap_or(DEFAULT_BUDGET_CHARS),
            dataset_name: layer.build.dataset_name.clone().unwrap_or_else(|| "nace-osm".into()),
            dataset_version: layer.build.dataset_version.clone().unwrap_or_else(|| "1".into()),
            tile_px: layer.tiles.tile_px.unwrap_or(DEFAULT_TILE_PX),
            zoom,
            osm_tiles,
            satellite_tiles,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// sha256 over the canonical JSON echo.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.to_json()).expect("json")))
    }

    pub fn user_agent(&self) -> String {
        match &self.contact {
            Some(c) => format!("nacekit/{} ({c})", env!("CARGO_PKG_VERSION")),
            None => format!("nacekit/{}", env!("CARGO_PKG_VERSION")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn live() -> FetchSetup {
        FetchSetup { mode: FetchMode::Live, store: None }
    }

    #[test]
    fn flags_beat_file_beat_env() {
        let env = Layer::from_env(|k| match k {
            "NACEKIT_WORKERS" => Some("2".into()),
            "NACEKIT_SEED" => Some("5".into()),
            "NACEKIT_MODEL" => Some("env-model".into()),
            _ => None,
        })
        .unwrap();
        let file = Layer::from_toml("seed = 9\n[gateway]\nmodel = \"file-model\"\n").unwrap();
        let flags = Layer { seed: Some(11), ..Layer::default() };
        let merged = env.overlay(&file).overlay(&flags);
        let eff = Effective::resolve(&merged, live()).unwrap();
        assert_eq!(eff.workers, 2);
        assert_eq!(eff.seed, 11);
        assert_eq!(eff.model, "file-model");
    }

    #[test]
    fn defaults() {
        let eff = Effective::resolve(&Layer::default(), live()).unwrap();
        assert_eq!(eff.pipeline, Pipeline::ZeroShot);
        assert_eq!(eff.inputs, InputConfiguration::All);
        assert_eq!(eff.template, PromptTemplate::SIMPLE_TEXT);
        assert_eq!(eff.temperature, 0.0);
        assert_eq!(eff.zoom, ZoomPolicy::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(Layer::from_toml("wrokers = 3").is_err());
        assert!(Layer::from_env(|k| (k == "NACEKIT_WORKERS").then(|| "many".into())).is_err());
        let bad = Layer::from_toml("[classify]\npipeline = \"three-turn\"").unwrap();
        assert!(Effective::resolve(&bad, live()).is_err());
    }

    #[test]
    fn replay_needs_store() {
        let setup = FetchSetup { mode: FetchMode::Replay, store: None };
        assert!(Effective::resolve(&Layer::default(), setup).is_err());
    }

    #[test]
    fn tile_providers_from_file() {
        let layer = Layer::from_toml(
            "[tiles]\nmax_tiles = 2\n[tiles.osm]\nname = \"local\"\nurl_template = \"http://t/{z}/{x}/{y}.png\"\nattribution = \"x\"\n",
        )
        .unwrap();
        let eff = Effective::resolve(&layer, live()).unwrap();
        assert_eq!(eff.osm_tiles.name, "local");
        assert_eq!(eff.osm_tiles.max_parallel, 2);
        assert_eq!(eff.zoom.max_tiles, 2);
    }
}
