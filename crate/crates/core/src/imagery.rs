//! Street-level imagery: request construction, availability checks, fetching
//! over HTTP or from a local directory, and JSON-lines manifests.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::SamplePoint;
use crate::raster;

pub const MAX_IMAGE_SIDE: u32 = 2048;

/// One camera orientation captured at every point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub heading: f64,
    pub pitch: f64,
}

/// Six headings, 60 degrees apart, level pitch.
pub fn default_captures() -> Vec<Capture> {
    (0..6).map(|i| Capture { heading: f64::from(i * 60), pitch: 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub point: SamplePoint,
    /// Degrees clockwise from north, in [0, 360).
    pub heading: f64,
    pub pitch: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

pub fn normalize_heading(h: f64) -> f64 {
    let n = h.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if n >= 360.0 {
        0.0
    } else {
        n
    }
}

impl ImageRequest {
    pub fn new(point: SamplePoint, capture: Capture, fov: f64, width: u32, height: u32) -> Result<Self> {
        let req = Self {
            point,
            heading: normalize_heading(capture.heading),
            pitch: capture.pitch,
            fov,
            width,
            height,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.point.lat.is_finite() && (-90.0..=90.0).contains(&self.point.lat))
            || !(self.point.lon.is_finite() && (-180.0..=180.0).contains(&self.point.lon))
        {
            return Err(Error::validation(format!("point {} has invalid coordinates", self.point.point_id)));
        }
        if !(0.0..360.0).contains(&self.heading) {
            return Err(Error::validation(format!("heading {} is not normalized", self.heading)));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(Error::validation(format!("pitch {} is outside [-90, 90]", self.pitch)));
        }
        if !(self.fov > 0.0 && self.fov <= 120.0) {
            return Err(Error::validation(format!("fov {} is outside (0, 120]", self.fov)));
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if !(1..=MAX_IMAGE_SIDE).contains(&v) {
                return Err(Error::validation(format!("{name} {v} is outside [1, {MAX_IMAGE_SIDE}]")));
            }
        }
        Ok(())
    }

    pub fn image_id(&self) -> String {
        image_id(&self.point.point_id, self.heading, self.pitch)
    }
}

pub fn image_id(point_id: &str, heading: f64, pitch: f64) -> String {
    format!("{point_id}_h{heading}_p{pitch}")
}

/// Every capture at every point, ordered by point then capture.
pub fn plan_requests(
    points: &[SamplePoint],
    captures: &[Capture],
    fov: f64,
    width: u32,
    height: u32,
) -> Result<Vec<ImageRequest>> {
    let mut out = Vec::with_capacity(points.len() * captures.len());
    for p in points {
        for &c in captures {
            out.push(ImageRequest::new(p.clone(), c, fov, width, height)?);
        }
    }
    Ok(out)
}

/// Static image URL. Floats print in shortest form, so heading 90 appears
/// as `heading=90`.
pub fn build_request_url(req: &ImageRequest, endpoint: &str, key: &str) -> Result<String> {
    let mut req = req.clone();
    req.heading = normalize_heading(req.heading);
    req.validate()?;
    Ok(format!(
        "{endpoint}?size={}x{}&heading={}&pitch={}&fov={}&location={},{}&key={}",
        req.width, req.height, req.heading, req.pitch, req.fov, req.point.lat, req.point.lon, key
    ))
}

pub fn build_metadata_url(point: &SamplePoint, endpoint: &str, key: &str) -> String {
    format!("{endpoint}?location={},{}&key={}", point.lat, point.lon, key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub image_endpoint: String,
    pub metadata_endpoint: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            image_endpoint: "https://maps.googleapis.com/maps/api/streetview".into(),
            metadata_endpoint: "https://maps.googleapis.com/maps/api/streetview/metadata".into(),
            api_key_env: "GVI_STREETVIEW_KEY".into(),
            max_attempts: 3,
            backoff_ms: 500,
            timeout_s: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// A GET primitive. `Err` means the request never produced a response.
pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self { agent: ureq::Agent::new_with_config(config) }
    }
}

impl HttpTransport for UreqTransport {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String> {
        let mut resp = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(32 << 20)
            .read_to_vec()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    key: String,
    transport: Arc<dyn HttpTransport>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig, key: String, transport: Arc<dyn HttpTransport>) -> Result<Self> {
        if config.max_attempts == 0 {
            return Err(Error::validation("max_attempts must be >= 1"));
        }
        Ok(Self { config, key, transport })
    }

    /// Reads the key from `config.api_key_env` and uses a real HTTP client.
    pub fn from_env(config: HttpConfig) -> Result<Self> {
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            Error::validation(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let transport = Arc::new(UreqTransport::new(Duration::from_secs(config.timeout_s)));
        Self::new(config, key, transport)
    }

    /// GET with bounded retries on 5xx, 429 and transport failures. The URL
    /// carries the key, so it never appears in errors.
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.transport.get(url) {
                Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
                Ok(r) if r.status >= 500 || r.status == 429 => last = format!("HTTP {}", r.status),
                Ok(r) => return Err(Error::validation(format!("request rejected with HTTP {}", r.status))),
                Err(e) => last = e.replace(&self.key, "<redacted>"),
            }
            if attempt < self.config.max_attempts && self.config.backoff_ms > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
        }
        Err(Error::Transport { attempts: self.config.max_attempts, message: last })
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    /// Directory of `{image_id}.png` files.
    Local(PathBuf),
    Http(HttpBackend),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Availability {
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pano_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Deserialize)]
struct Metadata {
    status: String,
    pano_id: Option<String>,
    date: Option<String>,
}

impl Backend {
    pub fn check_availability(&self, point: &SamplePoint) -> Result<Availability> {
        match self {
            Backend::Local(dir) => {
                let prefix = format!("{}_", point.point_id);
                let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
                let mut available = false;
                for entry in entries {
                    let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
                    let name = name.to_string_lossy();
                    if name.starts_with(&prefix) && name.ends_with(".png") {
                        available = true;
                        break;
                    }
                }
                Ok(Availability { available, pano_id: None, date: None })
            }
            Backend::Http(http) => {
                let url = build_metadata_url(point, &http.config.metadata_endpoint, &http.key);
                let body = http.get(&url)?;
                let meta: Metadata = serde_json::from_slice(&body)?;
                match meta.status.as_str() {
                    "OK" => Ok(Availability { available: true, pano_id: meta.pano_id, date: meta.date }),
                    "ZERO_RESULTS" | "NOT_FOUND" => Ok(Availability { available: false, pano_id: None, date: None }),
                    other => Err(Error::validation(format!("metadata request failed with status {other}"))),
                }
            }
        }
    }

    /// PNG bytes for one request. Local files are returned verbatim; HTTP
    /// payloads are re-encoded as PNG.
    pub fn fetch(&self, req: &ImageRequest) -> Result<Vec<u8>> {
        match self {
            Backend::Local(dir) => {
                let path = dir.join(format!("{}.png", req.image_id()));
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                raster::decode_png(&bytes)?;
                Ok(bytes)
            }
            Backend::Http(http) => {
                let url = build_request_url(req, &http.config.image_endpoint, &http.key)?;
                let body = http.get(&url)?;
                raster::encode_png(&raster::decode_any(&body)?)
            }
        }
    }
}

/// One manifest line as stored on disk. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_id: Option<String>,
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
    pub pitch: f64,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// Reference GVI label, when known without a mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gvi: Option<f64>,
}

/// A manifest entry with paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub entry: ManifestEntry,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

impl ImageRecord {
    pub fn image_id(&self) -> &str {
        &self.entry.image_id
    }

    /// Point the image belongs to; falls back to the image-id prefix.
    pub fn point_id(&self) -> String {
        match &self.entry.point_id {
            Some(p) => p.clone(),
            None => match self.entry.image_id.rsplit_once("_h") {
                Some((p, _)) => p.to_string(),
                None => self.entry.image_id.clone(),
            },
        }
    }
}

/// A record-level failure; the rest of the run continues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Sorted by image id.
    pub records: Vec<ImageRecord>,
    pub errors: Vec<RecordError>,
}

impl Manifest {
    /// Non-blank lines seen, good or bad.
    pub fn line_count(&self) -> usize {
        self.records.len() + self.errors.len()
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Deserialize)]
struct LooseEntry {
    image_id: Option<String>,
    #[serde(default)]
    point_id: Option<String>,
    lat: Option<f64>,
    lon: Option<f64>,
    heading: Option<f64>,
    pitch: Option<f64>,
    image_path: Option<String>,
    #[serde(default)]
    mask_path: Option<String>,
    #[serde(default)]
    gvi: Option<f64>,
}

fn check_entry(e: LooseEntry, base: &Path) -> std::result::Result<ImageRecord, String> {
    let missing = |f: &str| format!("missing field {f}");
    let entry = ManifestEntry {
        image_id: e.image_id.ok_or_else(|| missing("image_id"))?,
        point_id: e.point_id,
        lat: e.lat.ok_or_else(|| missing("lat"))?,
        lon: e.lon.ok_or_else(|| missing("lon"))?,
        heading: e.heading.ok_or_else(|| missing("heading"))?,
        pitch: e.pitch.ok_or_else(|| missing("pitch"))?,
        image_path: e.image_path.ok_or_else(|| missing("image_path"))?,
        mask_path: e.mask_path,
        gvi: e.gvi,
    };
    if let Some(g) = entry.gvi {
        if !(0.0..=1.0).contains(&g) {
            return Err(format!("gvi {g} is outside [0, 1]"));
        }
    }
    let image_path = resolve(base, &entry.image_path);
    let (w, h) = image::ImageReader::open(&image_path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| format!("cannot read {}: {e}", image_path.display()))?
        .into_dimensions()
        .map_err(|e| format!("cannot decode {}: {e}", image_path.display()))?;
    if w == 0 || h == 0 {
        return Err(format!("{} is empty", image_path.display()));
    }
    let mask_path = entry.mask_path.as_deref().map(|m| resolve(base, m));
    if let Some(m) = &mask_path {
        if !m.is_file() {
            return Err(format!("mask {} does not exist", m.display()));
        }
    }
    Ok(ImageRecord { entry, image_path, mask_path })
}

/// Parses manifest text. Bad records are collected; a duplicate image id
/// is a hard error.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut out = Manifest::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let loose: LooseEntry = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                out.errors.push(RecordError { line: Some(lineno), image_id: None, message: e.to_string() });
                continue;
            }
        };
        let id = loose.image_id.clone();
        if let Some(id) = &id {
            if !seen.insert(id.clone()) {
                return Err(Error::Parse { line: lineno as u32, message: format!("duplicate image_id {id}") });
            }
        }
        match check_entry(loose, base) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(RecordError { line: Some(lineno), image_id: id, message }),
        }
    }
    out.records.sort_by(|a, b| a.entry.image_id.cmp(&b.entry.image_id));
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

pub fn write_manifest<W: Write>(entries: &[ManifestEntry], mut out: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

pub fn write_errors<W: Write>(errors: &[RecordError], mut out: W) -> Result<()> {
    for e in errors {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("<errors>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FetchOutcome {
    /// Written manifest entries, sorted by image id.
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<RecordError>,
}

/// Fetches every request with up to `parallelism` workers, writing
/// `images/{image_id}.png` and `manifest.jsonl` under `out_dir`.
pub fn fetch_images(
    requests: &[ImageRequest],
    backend: &Backend,
    parallelism: usize,
    out_dir: &Path,
) -> Result<FetchOutcome> {
    let mut ids = BTreeSet::new();
    for r in requests {
        r.validate()?;
        if !ids.insert(r.image_id()) {
            return Err(Error::validation(format!("duplicate image id {}", r.image_id())));
        }
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let pool = thread_pool(parallelism)?;
    let results: Vec<std::result::Result<ManifestEntry, RecordError>> = pool.install(|| {
        requests
            .par_iter()
            .map(|req| {
                let id = req.image_id();
                let fail = |e: Error| RecordError { line: None, image_id: Some(id.clone()), message: e.to_string() };
                let bytes = backend.fetch(req).map_err(fail)?;
                let rel = format!("images/{id}.png");
                let path = out_dir.join(&rel);
                std::fs::write(&path, &bytes).map_err(|e| fail(Error::io(&path, e)))?;
                Ok(ManifestEntry {
                    image_id: id.clone(),
                    point_id: Some(req.point.point_id.clone()),
                    lat: req.point.lat,
                    lon: req.point.lon,
                    heading: req.heading,
                    pitch: req.pitch,
                    image_path: rel,
                    mask_path: None,
                    gvi: None,
                })
            })
            .collect()
    });
    let mut out = FetchOutcome::default();
    for r in results {
        match r {
            Ok(e) => out.entries.push(e),
            Err(e) => out.errors.push(e),
        }
    }
    out.entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out.errors.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let manifest = out_dir.join("manifest.jsonl");
    let file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    write_manifest(&out.entries, std::io::BufWriter::new(file))?;
    Ok(out)
}

pub(crate) fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    if parallelism == 0 {
        return Err(Error::validation("parallelism must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))
}
