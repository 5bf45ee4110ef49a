use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use gvi_core::geo::{self, HighwayFilter};
use gvi_core::imagery::{self, Backend, HttpBackend};
use gvi_core::nnet::{self, ConvNet, Head};
use gvi_core::pipeline::{self, Aggregation, Estimator, PipelineConfig, RunOutcome};

#[derive(Parser)]
#[command(name = "gvi", version, about = "Green View Index from street-level imagery")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmentBackend {
    Meanshift,
    NnetSeg,
    Import,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchBackend {
    Meanshift,
    NnetReg,
    NnetSeg,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Regression,
    Segmentation,
}

#[derive(Subcommand)]
enum Command {
    /// Sample points along an OSM road network.
    Sample {
        #[arg(long)]
        osm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spacing: Option<f64>,
        /// Comma-separated highway values to keep.
        #[arg(long, value_delimiter = ',')]
        highway: Option<Vec<String>>,
    },
    /// Fetch images for sampled points, from a local directory or over HTTP.
    Fetch {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of `{image_id}.png` files; HTTP when absent.
        #[arg(long)]
        local: Option<PathBuf>,
        /// Skip points without imagery (one metadata lookup per point).
        #[arg(long)]
        check: bool,
    },
    /// Per-image vegetation masks and GVIs.
    Segment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        backend: SegmentBackend,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-point GVI from segment results or a regression model.
    Gvi {
        #[arg(long, conflicts_with_all = ["manifest", "model"])]
        results: Option<PathBuf>,
        #[arg(long, requires = "model")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        model: Option<PathBuf>,
        /// Sampled points, to report points without images.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a labelled manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        head: HeadArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against a labelled manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Grad-CAM overlays for a regression model.
    Gradcam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Layer index; the last convolution by default.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Time decode plus estimation over increasing image counts.
    Bench {
        #[arg(long, value_enum)]
        backend: BenchBackend,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "100,1000")]
        counts: Vec<usize>,
        /// Use this manifest's images instead of synthetic ones.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Distinct synthetic images to cycle through.
        #[arg(long, default_value_t = 1)]
        distinct: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// GeoJSON of per-point GVIs.
    Export {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        distractor_prob: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Completed with some records failing.
struct Partial;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Partial)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_model(path: Option<&Path>, head: Head) -> Result<ConvNet> {
    let path = path.context("this backend needs --model")?;
    let bytes = std::fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    let net = nnet::load_checkpoint(&bytes).with_context(|| format!("loading model {}", path.display()))?;
    if net.config().head != head {
        bail!("{} holds a {:?} network, expected {:?}", path.display(), net.config().head, head);
    }
    Ok(net)
}

fn load_manifest(path: &Path) -> Result<imagery::Manifest> {
    let m = imagery::load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    for e in &m.errors {
        warn!("manifest line {:?} ({:?}): {}", e.line, e.image_id, e.message);
    }
    Ok(m)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_points(path: &Path) -> Result<Vec<geo::SamplePoint>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(geo::read_points_jsonl(BufReader::new(f))?)
}

fn finish(outcome: &RunOutcome) -> Option<Partial> {
    info!("{} images processed, {} errors", outcome.results.len(), outcome.errors.len());
    outcome.is_partial().then_some(Partial)
}

#[derive(serde::Serialize)]
struct RunSummary {
    n_images: usize,
    n_errors: usize,
}

fn run(cli: Cli) -> Result<Option<Partial>> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let jobs = match cli.jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(j) => j,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };

    match cli.command {
        Command::Sample { osm, out, spacing, highway } => {
            if let Some(s) = spacing {
                cfg.sample.spacing_m = s;
            }
            if highway.is_some() {
                cfg.sample.highway = highway;
            }
            cfg.validate()?;
            let text = std::fs::read_to_string(&osm).with_context(|| format!("reading {}", osm.display()))?;
            let filter = match &cfg.sample.highway {
                Some(v) => HighwayFilter::only(v.iter().cloned()),
                None => HighwayFilter::default(),
            };
            let net = geo::parse_osm_xml(&text, &filter).with_context(|| format!("parsing {}", osm.display()))?;
            let points = geo::sample_points(&net, cfg.sample.spacing_m)?;
            geo::write_points_jsonl(&points, create(&out)?)?;
            info!("{} points from {} ways", points.len(), net.ways.len());
            Ok(None)
        }

        Command::Fetch { points, out, local, check } => {
            let mut points = read_points(&points)?;
            let backend = match local {
                Some(dir) => Backend::Local(dir),
                None => Backend::Http(HttpBackend::from_env(cfg.imagery.http.clone())?),
            };
            if check {
                let mut available = Vec::new();
                for p in points {
                    let a = backend.check_availability(&p)?;
                    if a.available {
                        available.push(p);
                    } else {
                        info!("no imagery at {}", p.point_id);
                    }
                }
                points = available;
            }
            let im = &cfg.imagery;
            let requests = imagery::plan_requests(&points, &im.captures, im.fov, im.width, im.height)?;
            let outcome = imagery::fetch_images(&requests, &backend, jobs, &out)?;
            imagery::write_errors(&outcome.errors, create(&out.join("errors.jsonl"))?)?;
            info!("{} images fetched, {} errors", outcome.entries.len(), outcome.errors.len());
            Ok((!outcome.errors.is_empty()).then_some(Partial))
        }

        Command::Segment { manifest, backend, model, out } => {
            let est = match backend {
                SegmentBackend::Meanshift => Estimator::MeanShift { params: cfg.meanshift, green: cfg.green },
                SegmentBackend::NnetSeg => Estimator::Segmenter(load_model(model.as_deref(), Head::Segmentation)?),
                SegmentBackend::Import => Estimator::Import,
            };
            let manifest = load_manifest(&manifest)?;
            let outcome = pipeline::run_segment(&manifest, &est, &out, jobs)?;
            pipeline::write_outcome(&outcome, &out)?;
            let summary = RunSummary { n_images: outcome.results.len(), n_errors: outcome.errors.len() };
            write_text(&out.join("summary.json"), &pipeline::report_json(&cfg, est.name(), &summary)?)?;
            Ok(finish(&outcome))
        }

        Command::Gvi { results, manifest, model, points, out } => {
            let (results, backend, partial) = match (results, manifest) {
                (Some(r), _) => {
                    let f = std::fs::File::open(&r).with_context(|| format!("opening {}", r.display()))?;
                    (pipeline::read_results(BufReader::new(f))?, "results".to_string(), None)
                }
                (None, Some(m)) => {
                    let est = Estimator::Regressor(load_model(model.as_deref(), Head::Regression)?);
                    let manifest = load_manifest(&m)?;
                    let outcome = pipeline::run_images(&manifest, &est, &out, jobs)?;
                    pipeline::write_outcome(&outcome, &out)?;
                    let partial = finish(&outcome);
                    (outcome.results, est.name().to_string(), partial)
                }
                (None, None) => bail!("give either --results or --manifest with --model"),
            };
            let known = points.as_deref().map(read_points).transpose()?;
            let agg = pipeline::aggregate_point_gvi(&results, known.as_deref())?;
            for p in &agg.omitted {
                warn!("point {p} has no images");
            }
            write_text(&out.join("points.json"), &pipeline::report_json(&cfg, &backend, &agg)?)?;
            println!("{:<24} {:>8} {:>8}", "point", "images", "gvi");
            for p in &agg.points {
                println!("{:<24} {:>8} {:>8.4}", p.point_id, p.n_images, p.gvi);
            }
            Ok(partial)
        }

        Command::Train { manifest, head, out, epochs, lr, batch_size, seed } => {
            let head = match head {
                HeadArg::Regression => Head::Regression,
                HeadArg::Segmentation => Head::Segmentation,
            };
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.seed = seed.unwrap_or(t.seed);
            cfg.validate()?;
            let manifest = load_manifest(&manifest)?;
            let samples = pipeline::training_samples(&manifest, head)?;
            let mut net = ConvNet::new(cfg.model.net_config(head), cfg.model.seed)?;
            info!("training {} parameters on {} samples", net.param_count(), samples.len());
            let tmp = out.with_extension("tmp");
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let report = nnet::train(&mut net, &samples, &cfg.train, |e, net| {
                info!("epoch {} loss {:.6}", e.epoch, e.loss);
                std::fs::write(&tmp, nnet::save_checkpoint(net)).map_err(|err| gvi_core::Error::Io { path: tmp.clone(), source: err })?;
                std::fs::rename(&tmp, &out).map_err(|err| gvi_core::Error::Io { path: out.clone(), source: err })?;
                Ok(())
            })?;
            if cfg.train.epochs == 0 {
                std::fs::write(&out, nnet::save_checkpoint(&net))?;
            }
            write_text(&out.with_extension("train.json"), &pipeline::report_json(&cfg, "train", &report)?)?;
            Ok(None)
        }

        Command::Eval { pred, truth, out, csv } => {
            let f = std::fs::File::open(&pred).with_context(|| format!("opening {}", pred.display()))?;
            let preds = pipeline::read_results(BufReader::new(f))?;
            let truth = load_manifest(&truth)?;
            let base = pred.parent().unwrap_or(Path::new("."));
            let report = pipeline::run_eval(&preds, base, &truth)?;
            write_text(&out, &pipeline::report_json(&cfg, "eval", &report)?)?;
            if let Some(csv) = csv {
                report.write_csv(create(&csv)?)?;
            }
            println!("images          {}", report.n);
            if let Some(iou) = report.mean_iou {
                println!("mean IoU        {iou:.4}");
            }
            println!("MAE             {:.4}", report.mean_abs_error);
            match report.pearson_r {
                Some(r) => println!("pearson r       {r:.4}"),
                None => println!("pearson r       undefined"),
            }
            if let (Some(lo), Some(hi)) = (report.err_q05, report.err_q95) {
                println!("error 5%..95%   {lo:.4} .. {hi:.4}");
            }
            Ok(None)
        }

        Command::Gradcam { model, manifest, out, layer } => {
            let net = load_model(Some(&model), Head::Regression)?;
            let manifest = load_manifest(&manifest)?;
            let (records, errors) = pipeline::run_gradcam(&net, &manifest, layer, &out, jobs)?;
            imagery::write_errors(&errors, create(&out.join("errors.jsonl"))?)?;
            info!("{} overlays written, {} errors", records.len(), errors.len());
            Ok((!errors.is_empty()).then_some(Partial))
        }

        Command::Bench { backend, model, counts, manifest, distinct, seed, out } => {
            let est = match backend {
                BenchBackend::Meanshift => Estimator::MeanShift { params: cfg.meanshift, green: cfg.green },
                BenchBackend::NnetReg => Estimator::Regressor(load_model(model.as_deref(), Head::Regression)?),
                BenchBackend::NnetSeg => Estimator::Segmenter(load_model(model.as_deref(), Head::Segmentation)?),
            };
            let payloads = match manifest {
                Some(m) => load_manifest(&m)?
                    .records
                    .iter()
                    .map(|r| std::fs::read(&r.image_path).with_context(|| format!("reading {}", r.image_path.display())))
                    .collect::<Result<Vec<_>>>()?,
                None => pipeline::synthetic_payloads(&cfg.synth, seed, distinct)?,
            };
            let report = pipeline::run_bench(&est, &payloads, &counts, jobs)?;
            write_text(&out, &pipeline::report_json(&cfg, est.name(), &report)?)?;
            print!("{}", report.table());
            Ok(None)
        }

        Command::Export { points, out } => {
            let text = std::fs::read_to_string(&points).with_context(|| format!("reading {}", points.display()))?;
            let agg: Aggregation = serde_json::from_str(&text).with_context(|| format!("parsing {}", points.display()))?;
            write_text(&out, &pipeline::export_geojson(&agg.points).to_string())?;
            info!("{} features written", agg.points.len());
            Ok(None)
        }

        Command::Synth { n, seed, distractor_prob, out } => {
            if let Some(p) = distractor_prob {
                cfg.synth.distractor_prob = p;
            }
            cfg.validate()?;
            let entries = pipeline::write_synthetic_dataset(&cfg.synth, seed, n, &out)?;
            info!("{} synthetic images written", entries.len());
            Ok(None)
        }
    }
}
