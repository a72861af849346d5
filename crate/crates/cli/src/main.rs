use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use grassmap_core::augment::{
    generate_augmented_dataset, load_png, save_png, split_dataset, AnnotatedImage, AugmentationSpec, Dataset, Split,
    SplitFractions, SplitMultipliers,
};
use grassmap_core::bench::{frames_with_detections, time_runs, BenchmarkReport, DEFAULT_REPEATS};
use grassmap_core::density::{coverage_density_grid, DensitySummary};
use grassmap_core::detector::{DetectorBackend, ReplayDetector, RunnerConfig, RunnerDetector};
use grassmap_core::eval::{evaluate, DEFAULT_EVAL_IOU};
use grassmap_core::geomap::{export_csv, export_geojson, DEFAULT_CELL_SIZE_M};
use grassmap_core::ingest::{
    load_manifest, parse_detection_log, parse_gps_track, parse_ground_truth_log, write_detection_log, FrameManifest,
};
use grassmap_core::pipeline::{run_pipeline, BaseImage, GeoConfig, PipelineConfig, PipelineOutput, StageTimings};
use grassmap_core::{write_atomic, WeedClass, DEFAULT_CONFIDENCE};

/// Misuse that clap cannot express; reported like a parse error.
#[derive(Debug)]
struct UsageError(&'static str);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0)
    }
}

impl std::error::Error for UsageError {}

/// Weed detection post-processing, density mapping, evaluation and dataset tooling.
#[derive(Debug, Parser)]
#[command(name = "grassmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline over a recorded detection log.
    Replay(PipelineArgs),
    /// Run the pipeline with an external detector process.
    Infer(PipelineArgs),
    /// Render overlays (and optional coverage grids) only.
    Overlay(PipelineArgs),
    /// Build the geolocated density grid only.
    Map(PipelineArgs),
    /// Time repeated full pipeline passes.
    Bench(BenchArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Split and augment an annotated image set.
    Augment(AugmentArgs),
    /// Assign image ids to train/val/test.
    Split(SplitArgs),
}

fn parse_confidence(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (c, r) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not COLSxROWS"))?;
    let c: u32 = c.parse().map_err(|_| format!("bad column count in `{s}`"))?;
    let r: u32 = r.parse().map_err(|_| format!("bad row count in `{s}`"))?;
    if c == 0 || r == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((c, r))
}

#[derive(Debug, Args)]
struct Source {
    /// Frame manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Recorded detection log (JSON lines).
    #[arg(long, conflicts_with = "model_runner")]
    detections: Option<PathBuf>,
    /// External detector command line, split on whitespace.
    #[arg(long)]
    model_runner: Option<String>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    source: Source,
    /// GPS track CSV (t_ms,lat,lon).
    #[arg(long)]
    gps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE, value_parser = parse_confidence)]
    confidence: f64,
    #[arg(long, default_value_t = DEFAULT_CELL_SIZE_M, value_parser = parse_positive)]
    cell_size: f64,
    /// Per-frame coverage grid, e.g. 8x6.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(u32, u32)>,
    /// Blend overlays onto the manifest's PNG frames instead of a blank canvas.
    #[arg(long)]
    images: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE, value_parser = parse_confidence)]
    confidence: f64,
    #[arg(long, default_value_t = DEFAULT_REPEATS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long)]
    images: bool,
    /// Label recorded in the report.
    #[arg(long, default_value = "replay")]
    label: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth annotation log (JSON lines, no confidences).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_IOU, value_parser = parse_positive)]
    iou: f64,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u32).range(1..))]
    multiplier_train: u32,
    /// Applied to both validation and test.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    multiplier_eval: u32,
}

fn manifest_with_images(path: &Path) -> Result<FrameManifest> {
    let mut m = load_manifest(path)?;
    m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(m)
}

fn make_backend(source: &Source, manifest: &FrameManifest) -> Result<Box<dyn DetectorBackend>> {
    match (&source.detections, &source.model_runner) {
        (Some(log), None) => Ok(Box::new(ReplayDetector::from_log(log, manifest)?)),
        (None, Some(cmd)) => {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            Ok(Box::new(RunnerDetector::spawn(RunnerConfig::new(argv))?))
        }
        _ => Err(UsageError("exactly one of --detections or --model-runner is required").into()),
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(out.join(name), contents.as_ref())?;
    Ok(())
}

/// Overlays are rendered into a hidden staging directory and moved into place
/// only once every frame succeeded.
struct OverlayStage {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl OverlayStage {
    fn new(out: &Path) -> Result<Self> {
        let dir = tempfile::Builder::new().prefix(".overlay-").tempdir_in(out)?;
        Ok(Self {
            dir,
            target: out.join("overlay"),
        })
    }

    fn commit(self) -> Result<()> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        let staged = self.dir.keep();
        std::fs::rename(&staged, &self.target).with_context(|| format!("moving overlays to {}", self.target.display()))
    }
}

fn summaries_json(out: &PipelineOutput) -> serde_json::Value {
    let frames: Vec<_> = out
        .frames
        .iter()
        .zip(&out.summaries)
        .map(|(f, s): (_, &DensitySummary)| {
            let counts: serde_json::Map<_, _> = WeedClass::ALL
                .iter()
                .map(|c| (c.name().to_string(), json!(s.counts.get(*c))))
                .collect();
            json!({"i": f.frame_index, "t_ms": f.timestamp_ms, "counts": counts, "dominant": s.dominant, "total": s.total})
        })
        .collect();
    json!({ "frames": frames })
}

fn coverage_json(out: &PipelineOutput, cols: u32, rows: u32) -> Result<serde_json::Value> {
    let grids = out
        .frames
        .iter()
        .map(|f| Ok(json!({"i": f.frame_index, "grid": coverage_density_grid(f, cols, rows)?})))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "frames": grids }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Products {
    All,
    Overlay,
    Map,
}

fn run_pipeline_command(args: &PipelineArgs, products: Products) -> Result<()> {
    let manifest = manifest_with_images(&args.source.manifest)?;
    let track = args.gps.as_ref().map(parse_gps_track).transpose()?;
    if products == Products::Map && track.is_none() {
        return Err(UsageError("map requires --gps").into());
    }
    let mut backend = make_backend(&args.source, &manifest)?;
    create_out(&args.out)?;

    let stage = if products == Products::Map {
        None
    } else {
        Some(OverlayStage::new(&args.out)?)
    };
    let config = PipelineConfig {
        confidence: args.confidence,
        base: if args.images {
            BaseImage::FromManifest
        } else {
            BaseImage::Blank([0, 0, 0])
        },
        overlay_dir: stage.as_ref().map(|s| s.dir.path().to_path_buf()),
        geo: track.map(|track| GeoConfig {
            track,
            cell_size_m: args.cell_size,
        }),
        ..PipelineConfig::default()
    };
    let out = run_pipeline(&manifest, backend.as_mut(), &config)?;

    if products == Products::All {
        write(&args.out, "detections.jsonl", write_detection_log(&out.frames))?;
        write(&args.out, "density.json", summaries_json(&out).to_string())?;
    }
    if let Some((cols, rows)) = args.grid {
        write(&args.out, "coverage.json", coverage_json(&out, cols, rows)?.to_string())?;
    }
    if let Some(grid) = &out.grid {
        if products != Products::Overlay {
            write(
                &args.out,
                "grid.geojson",
                serde_json::to_string_pretty(&export_geojson(grid))?,
            )?;
            write(&args.out, "grid.csv", export_csv(grid))?;
        }
    }
    if let Some(stage) = stage {
        stage.commit()?;
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let manifest = manifest_with_images(&args.source.manifest)?;
    let mut backend = make_backend(&args.source, &manifest)?;
    create_out(&args.out)?;
    let config = PipelineConfig {
        confidence: args.confidence,
        base: if args.images {
            BaseImage::FromManifest
        } else {
            BaseImage::Blank([0, 0, 0])
        },
        ..PipelineConfig::default()
    };
    let mut last: Option<PipelineOutput> = None;
    let mut timings: Vec<StageTimings> = Vec::new();
    let runs = time_runs(args.runs as usize, 0, || -> Result<()> {
        // Each pass writes its overlays, as a real run would; they are discarded afterwards.
        let scratch = tempfile::Builder::new().prefix(".bench-").tempdir_in(&args.out)?;
        let cfg = PipelineConfig {
            overlay_dir: Some(scratch.path().to_path_buf()),
            ..config.clone()
        };
        let out = run_pipeline(&manifest, backend.as_mut(), &cfg)?;
        timings.push(out.timings);
        last = Some(out);
        Ok(())
    })?;
    let out = last.expect("at least one run");
    let fwd = frames_with_detections(&out.frames, args.confidence);
    let mut report = BenchmarkReport::new(&args.label, runs, manifest.len(), fwd, args.confidence)?;
    let n = timings.len() as f64;
    for t in &timings {
        for (k, v) in t.as_secs_map() {
            *report.stage_means.entry(k).or_insert(0.0) += v / n;
        }
    }
    write(&args.out, "report.json", report.to_json_string())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let preds = parse_detection_log(&args.detections, &manifest)?;
    let gts = parse_ground_truth_log(&args.gt, &manifest)?;
    let report = evaluate(&preds, &gts, args.iou)?;
    create_out(&args.out)?;
    write(&args.out, "eval.json", report.to_json_string())
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn split_ids(manifest: &FrameManifest) -> Vec<String> {
    manifest.entries.iter().map(|e| image_id(&e.image_path)).collect()
}

fn split(args: &SplitArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let plan = split_dataset(&split_ids(&manifest), SplitFractions::default(), args.seed)?;
    create_out(&args.out)?;
    let counts: serde_json::Map<_, _> = Split::ALL
        .iter()
        .map(|s| (s.name().to_string(), json!(plan.count(*s))))
        .collect();
    let doc = json!({
        "seed": plan.seed,
        "fractions": plan.fractions,
        "counts": counts,
        "assignment": plan.assignment,
    });
    write(&args.out, "split.json", serde_json::to_string_pretty(&doc)?)
}

fn augment(args: &AugmentArgs) -> Result<()> {
    let manifest = manifest_with_images(&args.manifest)?;
    let gts = parse_ground_truth_log(&args.gt, &manifest)?;
    let ids = split_ids(&manifest);
    let plan = split_dataset(&ids, SplitFractions::default(), args.seed)?;

    let mut dataset = Dataset::default();
    for ((entry, gt), id) in manifest.entries.iter().zip(&gts).zip(&ids) {
        let pixels = load_png(&entry.image_path)?;
        let img = AnnotatedImage::new(id.clone(), pixels, gt.boxes.clone())?;
        match plan.assignment[id] {
            Split::Train => dataset.train.push(img),
            Split::Val => dataset.val.push(img),
            Split::Test => dataset.test.push(img),
        }
    }
    let spec = AugmentationSpec {
        seed: args.seed,
        outputs_per_image: args.multiplier_train,
        ..AugmentationSpec::default()
    };
    let multipliers = SplitMultipliers {
        train: args.multiplier_train,
        val: args.multiplier_eval,
        test: args.multiplier_eval,
    };
    let augmented = generate_augmented_dataset(&dataset, &spec, multipliers)?;

    create_out(&args.out)?;
    let mut listing = serde_json::Map::new();
    for s in Split::ALL {
        let dir = args.out.join("images").join(s.name());
        create_out(&dir)?;
        let mut items = Vec::new();
        for img in augmented.split(s) {
            let rel = format!("images/{}/{}.png", s.name(), img.id);
            save_png(args.out.join(&rel), &img.pixels)?;
            let boxes: Vec<_> = img
                .boxes
                .iter()
                .map(|b| json!({"cls": b.cls, "xyxy": b.bbox.to_array()}))
                .collect();
            items.push(json!({"id": img.id, "path": rel, "boxes": boxes}));
        }
        listing.insert(s.name().to_string(), serde_json::Value::Array(items));
    }
    let doc = json!({"seed": args.seed, "total": augmented.len(), "splits": listing});
    write(&args.out, "dataset.json", serde_json::to_string_pretty(&doc)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Replay(a) => {
            if a.source.detections.is_none() {
                return Err(UsageError("replay requires --detections").into());
            }
            run_pipeline_command(a, Products::All)
        }
        Command::Infer(a) => {
            if a.source.model_runner.is_none() {
                return Err(UsageError("infer requires --model-runner").into());
            }
            run_pipeline_command(a, Products::All)
        }
        Command::Overlay(a) => run_pipeline_command(a, Products::Overlay),
        Command::Map(a) => run_pipeline_command(a, Products::Map),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
        Command::Augment(a) => augment(a),
        Command::Split(a) => split(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
