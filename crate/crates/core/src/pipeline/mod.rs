//! Orchestration of the stages: configuration, per-image estimation over a
//! manifest, per-point aggregation, evaluation, benchmarking and export.

mod bench;
mod eval;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bench::{run_bench, synthetic_payloads, BenchReport, BenchRow};
pub use eval::run_eval;

use crate::error::{Error, Result};
use crate::geo::SamplePoint;
use crate::gradcam::{self, CamInfo};
use crate::imagery::{self, Capture, HttpConfig, ImageRecord, Manifest, ManifestEntry, RecordError};
use crate::meanshift::{self, GreenParams, MeanShiftParams};
use crate::nnet::{self, ConvNet, Head, Target, TrainConfig, TrainSample};
use crate::raster::{self, BinaryMask, RgbImage};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub spacing_m: f64,
    /// Highway tag values to keep; all when absent.
    pub highway: Option<Vec<String>>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { spacing_m: 20.0, highway: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageryConfig {
    pub captures: Vec<Capture>,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    pub http: HttpConfig,
}

impl Default for ImageryConfig {
    fn default() -> Self {
        Self {
            captures: imagery::default_captures(),
            fov: 90.0,
            width: 400,
            height: 400,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: Vec<usize>,
    pub input_size: usize,
    /// Weight initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { blocks: vec![8, 8], input_size: nnet::NetConfig::DEFAULT_INPUT, seed: 0 }
    }
}

impl ModelConfig {
    pub fn net_config(&self, head: Head) -> nnet::NetConfig {
        let base = match head {
            Head::Regression => nnet::NetConfig::regression(self.blocks.clone()),
            Head::Segmentation => nnet::NetConfig::segmentation(self.blocks.clone()),
        };
        base.with_input(self.input_size, self.input_size)
    }
}

/// Everything a run can be configured with. Parallelism is deliberately
/// not part of it, so reports do not depend on the worker count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sample: SampleConfig,
    pub imagery: ImageryConfig,
    pub meanshift: MeanShiftParams,
    pub green: GreenParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() as u32 + 1)
                .unwrap_or(0);
            Error::Parse { line, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample.spacing_m > 0.0 && self.sample.spacing_m.is_finite()) {
            return Err(Error::validation("sample.spacing_m must be positive"));
        }
        if self.imagery.captures.is_empty() {
            return Err(Error::validation("imagery.captures must not be empty"));
        }
        self.meanshift.validate()?;
        self.green.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.model.net_config(Head::Regression).validate()
    }
}

/// Serializes `body` with the effective config and backend added, keys
/// sorted, so identical inputs give identical bytes.
pub fn report_json<T: Serialize>(config: &PipelineConfig, backend: &str, body: &T) -> Result<String> {
    let mut value = serde_json::to_value(body)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::validation("report body must serialize to an object"))?;
    obj.insert("backend".into(), backend.into());
    obj.insert("config".into(), serde_json::to_value(config)?);
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

/// Per-image GVI, one JSON line each in `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub point_id: String,
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
    pub pitch: f64,
    pub gvi: f64,
    /// Relative to the results file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

/// How a GVI is obtained for an image.
#[derive(Debug, Clone)]
pub enum Estimator {
    MeanShift { params: MeanShiftParams, green: GreenParams },
    Segmenter(ConvNet),
    Regressor(ConvNet),
    /// Masks supplied in the manifest.
    Import,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::MeanShift { .. } => "meanshift",
            Estimator::Segmenter(_) => "nnet-seg",
            Estimator::Regressor(_) => "nnet-reg",
            Estimator::Import => "import",
        }
    }

    pub fn produces_mask(&self) -> bool {
        !matches!(self, Estimator::Regressor(_))
    }

    /// Checks done once, before any image is touched.
    pub fn validate(&self) -> Result<()> {
        match self {
            Estimator::MeanShift { params, green } => {
                params.validate()?;
                green.validate()
            }
            Estimator::Segmenter(net) if net.config().head != Head::Segmentation => {
                Err(Error::validation("nnet-seg needs a segmentation checkpoint"))
            }
            Estimator::Regressor(net) if net.config().head != Head::Regression => {
                Err(Error::validation("nnet-reg needs a regression checkpoint"))
            }
            _ => Ok(()),
        }
    }

    pub fn estimate_image(&self, img: &RgbImage) -> Result<(f64, Option<BinaryMask>)> {
        match self {
            Estimator::MeanShift { params, green } => {
                let (_, mask) = meanshift::segment_vegetation(img, params, green)?;
                Ok((meanshift::gvi_of_mask(&mask), Some(mask)))
            }
            Estimator::Segmenter(net) => {
                let mask = nnet::predict_mask(net, img)?;
                Ok((meanshift::gvi_of_mask(&mask), Some(mask)))
            }
            Estimator::Regressor(net) => Ok((nnet::predict_gvi(net, img)?, None)),
            Estimator::Import => Err(Error::validation("import reads masks, not images")),
        }
    }

    fn estimate_record(&self, rec: &ImageRecord) -> Result<(f64, Option<BinaryMask>)> {
        if let Estimator::Import = self {
            let path = rec
                .mask_path
                .as_ref()
                .ok_or_else(|| Error::validation(format!("{} has no mask_path", rec.image_id())))?;
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let mask = raster::decode_mask_png(&bytes)?;
            return Ok((meanshift::gvi_of_mask(&mask), Some(mask)));
        }
        let bytes = std::fs::read(&rec.image_path).map_err(|e| Error::io(&rec.image_path, e))?;
        self.estimate_image(&raster::decode_any(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutcome {
    /// Sorted by image id.
    pub results: Vec<ImageResult>,
    /// Manifest errors followed by processing errors.
    pub errors: Vec<RecordError>,
}

impl RunOutcome {
    pub fn is_partial(&self) -> bool {
        !self.errors.is_empty()
    }
}

/// Runs `est` over every manifest record with `jobs` workers. Masks go to
/// `out_dir/masks/{image_id}.png`; nothing else is written.
pub fn run_images(manifest: &Manifest, est: &Estimator, out_dir: &Path, jobs: usize) -> Result<RunOutcome> {
    est.validate()?;
    let dir = if est.produces_mask() { out_dir.join("masks") } else { out_dir.to_path_buf() };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pool = imagery::thread_pool(jobs)?;
    let per_image: Vec<std::result::Result<ImageResult, RecordError>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let fail = |e: Error| RecordError {
                    line: None,
                    image_id: Some(rec.image_id().to_string()),
                    message: e.to_string(),
                };
                let (gvi, mask) = est.estimate_record(rec).map_err(fail)?;
                let mask_path = match mask {
                    Some(m) => {
                        let rel = format!("masks/{}.png", rec.image_id());
                        let path = out_dir.join(&rel);
                        let png = raster::encode_mask_png(&m).map_err(fail)?;
                        std::fs::write(&path, png).map_err(|e| fail(Error::io(&path, e)))?;
                        Some(rel)
                    }
                    None => None,
                };
                let e = &rec.entry;
                Ok(ImageResult {
                    image_id: e.image_id.clone(),
                    point_id: rec.point_id(),
                    lat: e.lat,
                    lon: e.lon,
                    heading: e.heading,
                    pitch: e.pitch,
                    gvi,
                    mask_path,
                })
            })
            .collect()
    });
    let mut out = RunOutcome { results: Vec::new(), errors: manifest.errors.clone() };
    for r in per_image {
        match r {
            Ok(v) => out.results.push(v),
            Err(e) => out.errors.push(e),
        }
    }
    out.results.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(out)
}

/// Mask-producing run (mean shift, segmentation network or import).
pub fn run_segment(manifest: &Manifest, est: &Estimator, out_dir: &Path, jobs: usize) -> Result<RunOutcome> {
    if !est.produces_mask() {
        return Err(Error::validation(format!("{} does not produce masks", est.name())));
    }
    run_images(manifest, est, out_dir, jobs)
}

pub fn write_results<W: Write>(results: &[ImageResult], mut out: W) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<results>", e))?;
    }
    Ok(())
}

pub fn read_results<R: BufRead>(input: R) -> Result<Vec<ImageResult>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<results>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i as u32 + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Writes `results.jsonl` and `errors.jsonl` into `dir`.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| Error::io(&p, e))
    };
    write_results(&outcome.results, create("results.jsonl")?)?;
    imagery::write_errors(&outcome.errors, create("errors.jsonl")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGvi {
    pub image_id: String,
    pub heading: f64,
    pub pitch: f64,
    pub gvi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGvi {
    pub point_id: String,
    pub lat: f64,
    pub lon: f64,
    /// Unweighted mean of the image GVIs.
    pub gvi: f64,
    pub n_images: usize,
    pub images: Vec<ImageGvi>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregation {
    /// Sorted by point id.
    pub points: Vec<PointGvi>,
    /// Known points without any image.
    pub omitted: Vec<String>,
}

/// Averages image GVIs per point. With `known`, every image must belong to
/// one of those points, and points without images are listed as omitted.
pub fn aggregate_point_gvi(results: &[ImageResult], known: Option<&[SamplePoint]>) -> Result<Aggregation> {
    let mut groups: BTreeMap<&str, Vec<&ImageResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.point_id.as_str()).or_default().push(r);
    }
    let mut omitted = Vec::new();
    let mut coords: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    if let Some(points) = known {
        for p in points {
            coords.insert(p.point_id.as_str(), (p.lat, p.lon));
        }
        let unknown: Vec<&str> = groups.keys().filter(|k| !coords.contains_key(*k)).copied().collect();
        if !unknown.is_empty() {
            return Err(Error::validation(format!("images refer to unknown points: {}", unknown.join(", "))));
        }
        omitted = coords.keys().filter(|k| !groups.contains_key(*k)).map(|k| k.to_string()).collect();
    }
    let points = groups
        .into_iter()
        .map(|(pid, mut imgs)| {
            imgs.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            let (lat, lon) = coords.get(pid).copied().unwrap_or((imgs[0].lat, imgs[0].lon));
            let gvi = imgs.iter().map(|r| r.gvi).sum::<f64>() / imgs.len() as f64;
            PointGvi {
                point_id: pid.to_string(),
                lat,
                lon,
                gvi,
                n_images: imgs.len(),
                images: imgs
                    .iter()
                    .map(|r| ImageGvi { image_id: r.image_id.clone(), heading: r.heading, pitch: r.pitch, gvi: r.gvi })
                    .collect(),
            }
        })
        .collect();
    Ok(Aggregation { points, omitted })
}

/// FeatureCollection of points, coordinates in lon, lat order.
pub fn export_geojson(points: &[PointGvi]) -> geojson::FeatureCollection {
    let features = points
        .iter()
        .map(|p| {
            let mut props = geojson::JsonObject::new();
            props.insert("point_id".into(), p.point_id.clone().into());
            props.insert("gvi".into(), p.gvi.into());
            props.insert("n_images".into(), p.n_images.into());
            geojson::Feature {
                bbox: None,
                geometry: Some(geojson::Geometry::new(geojson::Value::Point(vec![p.lon, p.lat]))),
                id: None,
                properties: Some(props),
                foreign_members: None,
            }
        })
        .collect();
    geojson::FeatureCollection { bbox: None, features, foreign_members: None }
}

/// Writes a labelled synthetic dataset: `images/`, `masks/` and a manifest
/// with GVI labels. Image `i` belongs to point `synth-{i}`.
pub fn write_synthetic_dataset(cfg: &SynthConfig, seed: u64, n: usize, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth::generate(cfg, seed, i as u64)?;
        let point_id = format!("synth-{i:05}");
        let image_id = imagery::image_id(&point_id, 0.0, 0.0);
        let image_path = format!("images/{image_id}.png");
        let mask_path = format!("masks/{image_id}.png");
        let write = |rel: &str, bytes: Vec<u8>| {
            let p = out_dir.join(rel);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(&image_path, raster::encode_png(&s.image)?)?;
        write(&mask_path, raster::encode_mask_png(&s.mask)?)?;
        entries.push(ManifestEntry {
            image_id,
            point_id: Some(point_id),
            lat: 0.0,
            lon: i as f64 * 1e-4,
            heading: 0.0,
            pitch: 0.0,
            image_path,
            mask_path: Some(mask_path),
            gvi: Some(s.gvi),
        });
    }
    let p = out_dir.join("manifest.jsonl");
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    imagery::write_manifest(&entries, std::io::BufWriter::new(f))?;
    Ok(entries)
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    raster::decode_mask_png(&bytes)
}

/// Reference GVI of a record: its mask when present, else its label.
pub fn reference_gvi(rec: &ImageRecord) -> Result<f64> {
    match (&rec.mask_path, rec.entry.gvi) {
        (Some(p), _) => Ok(meanshift::gvi_of_mask(&read_mask(p)?)),
        (None, Some(g)) => Ok(g),
        (None, None) => Err(Error::validation(format!("{} has neither mask_path nor gvi", rec.image_id()))),
    }
}

/// Training samples for `head` from a labelled manifest. Any record-level
/// problem is fatal here: training on a silently shrunken set is worse than
/// not training.
pub fn training_samples(manifest: &Manifest, head: Head) -> Result<Vec<TrainSample>> {
    if let Some(e) = manifest.errors.first() {
        return Err(Error::validation(format!(
            "manifest has {} bad records; first: {}",
            manifest.errors.len(),
            e.message
        )));
    }
    manifest
        .records
        .iter()
        .map(|rec| {
            let bytes = std::fs::read(&rec.image_path).map_err(|e| Error::io(&rec.image_path, e))?;
            let image = raster::decode_any(&bytes)?;
            let target = match head {
                Head::Regression => Target::Gvi(reference_gvi(rec)? as f32),
                Head::Segmentation => {
                    let path = rec.mask_path.as_ref().ok_or_else(|| {
                        Error::validation(format!("{} has no mask_path", rec.image_id()))
                    })?;
                    let mask = read_mask(path)?;
                    raster::require_same_dims(&mask, &image, rec.image_id())?;
                    Target::Mask(mask)
                }
            };
            Ok(TrainSample { image, target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CamRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub info: CamInfo,
}

/// Writes `{image_id}.png` overlays and `{image_id}.json` sidecars into
/// `out_dir`.
pub fn run_gradcam(
    net: &ConvNet,
    manifest: &Manifest,
    layer: Option<usize>,
    out_dir: &Path,
    jobs: usize,
) -> Result<(Vec<CamRecord>, Vec<RecordError>)> {
    let layer = match layer {
        Some(l) => l,
        None => net.last_conv_layer().ok_or_else(|| Error::validation("network has no convolution"))?,
    };
    if net.config().head != Head::Regression {
        return Err(Error::validation("Grad-CAM needs a regression head"));
    }
    if !matches!(net.layers().get(layer), Some(nnet::Layer::Conv3x3 { .. })) {
        return Err(Error::validation(format!("layer {layer} is not a 3x3 convolution")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = imagery::thread_pool(jobs)?;
    let results: Vec<std::result::Result<CamRecord, RecordError>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let id = rec.image_id().to_string();
                let fail = |e: Error| RecordError { line: None, image_id: Some(id.clone()), message: e.to_string() };
                let bytes = std::fs::read(&rec.image_path).map_err(|e| fail(Error::io(&rec.image_path, e)))?;
                let img = raster::decode_any(&bytes).map_err(fail)?;
                let cam = gradcam::grad_cam(net, &img, layer).map_err(fail)?;
                let overlay = gradcam::render_overlay(&img, &cam.heatmap).map_err(fail)?;
                let record = CamRecord { image_id: id.clone(), info: cam.info };
                let png = out_dir.join(format!("{id}.png"));
                std::fs::write(&png, raster::encode_png(&overlay).map_err(fail)?).map_err(|e| fail(Error::io(&png, e)))?;
                let json = out_dir.join(format!("{id}.json"));
                let text = serde_json::to_string_pretty(&record).map_err(|e| fail(e.into()))?;
                std::fs::write(&json, text).map_err(|e| fail(Error::io(&json, e)))?;
                Ok(record)
            })
            .collect()
    });
    let mut ok = Vec::new();
    let mut errors = manifest.errors.clone();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(e),
        }
    }
    Ok((ok, errors))
}

/// Ids present in only one of two sets, for error messages.
pub(crate) fn id_mismatch<'a>(left: &BTreeSet<&'a str>, right: &BTreeSet<&'a str>) -> Vec<&'a str> {
    left.symmetric_difference(right).copied().collect()
}

pub(crate) fn resolve_result_mask(base: &Path, r: &ImageResult) -> Option<PathBuf> {
    r.mask_path.as_ref().map(|m| {
        let p = Path::new(m);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    })
}
