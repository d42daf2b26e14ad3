//! Web-Mercator slippy tiles: projection, dynamic zoom, tile grids, and
//! stitching fetched tiles into one aligned raster per provider.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use image::{GenericImage, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fetch::{FetchError, Fetcher, Request};

/// Latitude limit of the square Web-Mercator world.
pub const MERCATOR_MAX_LAT: f64 = 85.051_128_779_806_59;
pub const MAX_ZOOM: u8 = 22;
pub const DEFAULT_TILE_PX: u32 = 256;
/// Half-width (degrees) used to give point features a nonzero extent.
pub const POINT_EXPANSION_DEG: f64 = 0.0005;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("latitude {0} outside the Web-Mercator range")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180)")]
    Longitude(f64),
    #[error("zoom {0} above {MAX_ZOOM}")]
    Zoom(u8),
    #[error("invalid bbox {0:?}")]
    BBox([f64; 4]),
    #[error("tile {z}/{x}/{y}: {source}")]
    Fetch {
        z: u8,
        x: u32,
        y: u32,
        #[source]
        source: FetchError,
    },
    #[error("tile {z}/{x}/{y}: corrupt image: {reason}")]
    CorruptTile { z: u8, x: u32, y: u32, reason: String },
    #[error("provider {0:?}: URL template must contain {{z}}, {{x}} and {{y}}")]
    Template(String),
    #[error("writing {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// WGS84 bounding box, stored and serialized as
/// `[min_lon, min_lat, max_lon, max_lat]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, TileError> {
        let b = BBox { min_lon, min_lat, max_lon, max_lat };
        let finite = b.to_array().iter().all(|v| v.is_finite());
        if !finite
            || min_lon > max_lon
            || min_lat > max_lat
            || min_lon < -180.0
            || max_lon > 180.0
            || min_lat < -90.0
            || max_lat > 90.0
        {
            return Err(TileError::BBox(b.to_array()));
        }
        Ok(b)
    }

    pub fn point(lon: f64, lat: f64) -> Result<Self, TileError> {
        Self::new(lon, lat, lon, lat)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.min_lon, self.min_lat, self.max_lon, self.max_lat]
    }

    pub fn is_degenerate(&self) -> bool {
        self.min_lon == self.max_lon || self.min_lat == self.max_lat
    }

    /// Expand zero-extent axes by [`POINT_EXPANSION_DEG`] on each side,
    /// clamped to valid coordinates.
    pub fn expanded_if_degenerate(self) -> Self {
        let mut b = self;
        if b.min_lon == b.max_lon {
            b.min_lon = (b.min_lon - POINT_EXPANSION_DEG).max(-180.0);
            b.max_lon = (b.max_lon + POINT_EXPANSION_DEG).min(180.0);
        }
        if b.min_lat == b.max_lat {
            b.min_lat = (b.min_lat - POINT_EXPANSION_DEG).max(-90.0);
            b.max_lat = (b.max_lat + POINT_EXPANSION_DEG).min(90.0);
        }
        b
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.min_lon + self.max_lon) / 2.0, (self.min_lat + self.max_lat) / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = TileError;

    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(z: u8, x: u32, y: u32) -> Option<Self> {
        let n = 1u64 << z;
        (z <= MAX_ZOOM && (x as u64) < n && (y as u64) < n).then_some(TileCoord { z, x, y })
    }

    /// Longitude/latitude of the tile's north-west corner.
    pub fn north_west(&self) -> (f64, f64) {
        tile_corner(self.z, self.x as f64, self.y as f64)
    }

    pub fn center(&self) -> (f64, f64) {
        tile_corner(self.z, self.x as f64 + 0.5, self.y as f64 + 0.5)
    }
}

fn tile_corner(z: u8, x: f64, y: f64) -> (f64, f64) {
    let n = (1u64 << z) as f64;
    let lon = x / n * 360.0 - 180.0;
    let lat = (std::f64::consts::PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees();
    (lon, lat)
}

/// Fractional tile position; no range checks.
fn project(lon: f64, lat: f64, z: u8) -> (f64, f64) {
    let n = (1u64 << z) as f64;
    let x = (lon + 180.0) / 360.0 * n;
    let y = (1.0 - lat.to_radians().tan().asinh() / std::f64::consts::PI) / 2.0 * n;
    (x, y)
}

/// Tile containing a point.
pub fn lonlat_to_tile(lon: f64, lat: f64, z: u8) -> Result<TileCoord, TileError> {
    if z > MAX_ZOOM {
        return Err(TileError::Zoom(z));
    }
    if !(lat.abs() < MERCATOR_MAX_LAT) {
        return Err(TileError::Latitude(lat));
    }
    if !(-180.0..180.0).contains(&lon) {
        return Err(TileError::Longitude(lon));
    }
    let (x, y) = project(lon, lat, z);
    let max = (1u64 << z) - 1;
    Ok(TileCoord {
        z,
        x: (x.floor() as u64).min(max) as u32,
        y: (y.floor() as u64).min(max) as u32,
    })
}

/// Inclusive rectangle of tiles at one zoom level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub z: u8,
    pub x_min: u32,
    pub x_max: u32,
    pub y_min: u32,
    pub y_max: u32,
    pub tile_px: u32,
}

impl TileGrid {
    pub fn cols(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn rows(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn width_px(&self) -> u32 {
        self.cols() * self.tile_px
    }

    pub fn height_px(&self) -> u32 {
        self.rows() * self.tile_px
    }

    /// Tiles in row-major order starting at the top-left.
    pub fn tiles(&self) -> impl Iterator<Item = TileCoord> + '_ {
        (self.y_min..=self.y_max)
            .flat_map(move |y| (self.x_min..=self.x_max).map(move |x| TileCoord { z: self.z, x, y }))
    }

    /// Geographic extent of the whole grid.
    pub fn bounds(&self) -> BBox {
        let (west, north) = tile_corner(self.z, self.x_min as f64, self.y_min as f64);
        let (east, south) = tile_corner(self.z, self.x_max as f64 + 1.0, self.y_max as f64 + 1.0);
        BBox { min_lon: west, min_lat: south, max_lon: east, max_lat: north }
    }
}

fn clamp_lat(lat: f64) -> f64 {
    // Nudge inside the open interval so poles do not project to infinity.
    lat.clamp(-MERCATOR_MAX_LAT + 1e-9, MERCATOR_MAX_LAT - 1e-9)
}

/// Smallest grid whose tiles contain both bbox corners at zoom `z`.
pub fn grid_for(bbox: &BBox, z: u8, tile_px: u32) -> TileGrid {
    let n = 1u64 << z;
    let idx = |v: f64| (v.floor().max(0.0) as u64).min(n - 1) as u32;
    let (x0, y0) = project(bbox.min_lon, clamp_lat(bbox.max_lat), z);
    let (x1, y1) = project(bbox.max_lon, clamp_lat(bbox.min_lat), z);
    TileGrid { z, x_min: idx(x0), x_max: idx(x1), y_min: idx(y0), y_max: idx(y1), tile_px }
}

/// Parameters of the dynamic zoom rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoomPolicy {
    /// Upper bound on grid columns and on grid rows.
    pub max_tiles: u32,
    pub min_zoom: u8,
    pub max_zoom: u8,
}

impl Default for ZoomPolicy {
    fn default() -> Self {
        ZoomPolicy { max_tiles: 4, min_zoom: 10, max_zoom: 19 }
    }
}

/// Largest zoom in `[min_zoom, max_zoom]` whose covering grid has at most
/// `max_tiles` tiles per axis; `min_zoom` when none qualifies. Degenerate
/// boxes are expanded first.
pub fn dynamic_zoom(bbox: &BBox, policy: &ZoomPolicy) -> Result<u8, TileError> {
    if policy.max_zoom > MAX_ZOOM {
        return Err(TileError::Zoom(policy.max_zoom));
    }
    if bbox.min_lat.abs() >= MERCATOR_MAX_LAT || bbox.max_lat.abs() >= MERCATOR_MAX_LAT {
        return Err(TileError::Latitude(if bbox.min_lat.abs() > bbox.max_lat.abs() {
            bbox.min_lat
        } else {
            bbox.max_lat
        }));
    }
    let bbox = bbox.expanded_if_degenerate();
    let max_tiles = policy.max_tiles.max(1);
    for z in (policy.min_zoom..=policy.max_zoom).rev() {
        let g = grid_for(&bbox, z, DEFAULT_TILE_PX);
        if g.cols() <= max_tiles && g.rows() <= max_tiles {
            return Ok(z);
        }
    }
    Ok(policy.min_zoom)
}

/// Zoom selection plus grid, the usual entry point for one element.
pub fn plan(bbox: &BBox, policy: &ZoomPolicy, tile_px: u32) -> Result<TileGrid, TileError> {
    let z = dynamic_zoom(bbox, policy)?;
    Ok(grid_for(&bbox.expanded_if_degenerate(), z, tile_px))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Osm,
    Satellite,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Osm => "osm",
            Provenance::Satellite => "satellite",
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tile service speaking the XYZ scheme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileProvider {
    pub name: String,
    /// e.g. `https://tile.openstreetmap.org/{z}/{x}/{y}.png`
    pub url_template: String,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub politeness_delay_ms: u64,
    pub attribution: String,
}

fn default_parallel() -> usize {
    2
}

impl TileProvider {
    pub fn validate(&self) -> Result<(), TileError> {
        let t = &self.url_template;
        if t.contains("{z}") && t.contains("{x}") && t.contains("{y}") {
            Ok(())
        } else {
            Err(TileError::Template(self.name.clone()))
        }
    }

    pub fn url_for(&self, tile: TileCoord) -> String {
        self.url_template
            .replace("{z}", &tile.z.to_string())
            .replace("{x}", &tile.x.to_string())
            .replace("{y}", &tile.y.to_string())
    }

    pub fn politeness(&self) -> Duration {
        Duration::from_millis(self.politeness_delay_ms)
    }

    /// Store kind under which this provider's tiles are recorded.
    pub fn store_kind(&self) -> String {
        format!("tile:{}", self.name)
    }
}

#[derive(Debug, Clone)]
pub struct StitchedImage {
    pub pixels: RgbaImage,
    pub provenance: Provenance,
    pub grid: TileGrid,
}

impl StitchedImage {
    pub fn file_name(entry_id: u64, provenance: Provenance) -> String {
        format!("{entry_id}_{provenance}.png")
    }

    pub fn write_png(&self, path: &Path) -> Result<(), TileError> {
        self.pixels
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| TileError::Write { path: path.display().to_string(), source })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.pixels
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }
}

/// Fetch every tile of `grid` from `provider` and assemble them row-major.
///
/// Up to `provider.max_parallel` requests run at once; assembly happens after
/// all fetches finish and is independent of completion order.
pub fn fetch_and_stitch(
    grid: &TileGrid,
    provider: &TileProvider,
    provenance: Provenance,
    fetcher: &Fetcher,
) -> Result<StitchedImage, TileError> {
    provider.validate()?;
    let tiles: Vec<TileCoord> = grid.tiles().collect();
    let kind = provider.store_kind();
    let next = AtomicUsize::new(0);
    let workers = provider.max_parallel.clamp(1, tiles.len().max(1));

    let mut fetched: Vec<Option<Result<Vec<u8>, TileError>>> = (0..tiles.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&tile) = tiles.get(i) else { break };
                        let url = provider.url_for(tile);
                        let res = fetcher
                            .fetch(&kind, &url, &Request::get(&url))
                            .map(|r| r.body)
                            .map_err(|source| TileError::Fetch { z: tile.z, x: tile.x, y: tile.y, source });
                        let failed = res.is_err();
                        local.push((i, res));
                        if failed {
                            break;
                        }
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            for (i, res) in h.join().expect("tile worker panicked") {
                fetched[i] = Some(res);
            }
        }
    });

    // Report the first failure in grid order so errors are deterministic.
    let mut bodies = Vec::with_capacity(tiles.len());
    for (tile, slot) in tiles.iter().zip(fetched) {
        match slot {
            Some(Ok(body)) => bodies.push(body),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(TileError::Fetch {
                    z: tile.z,
                    x: tile.x,
                    y: tile.y,
                    source: FetchError::Transport {
                        kind: kind.clone(),
                        locator: provider.url_for(*tile),
                        message: "not fetched: an earlier tile failed".into(),
                        attempts: 0,
                    },
                })
            }
        }
    }

    let mut canvas = RgbaImage::new(grid.width_px(), grid.height_px());
    for (tile, body) in tiles.iter().zip(bodies) {
        let corrupt = |reason: String| TileError::CorruptTile { z: tile.z, x: tile.x, y: tile.y, reason };
        let img = image::load_from_memory(&body).map_err(|e| corrupt(e.to_string()))?.to_rgba8();
        if img.width() != grid.tile_px || img.height() != grid.tile_px {
            return Err(corrupt(format!(
                "expected {}x{} px, got {}x{}",
                grid.tile_px,
                grid.tile_px,
                img.width(),
                img.height()
            )));
        }
        let col = tile.x - grid.x_min;
        let row = tile.y - grid.y_min;
        canvas
            .copy_from(&img, col * grid.tile_px, row * grid.tile_px)
            .expect("tile lies inside the canvas");
    }
    Ok(StitchedImage { pixels: canvas, provenance, grid: *grid })
}
