use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vitiseg::analysis::AnalysisParams;
use vitiseg::annotation::{AnnotationSet, PrimitiveKind};
use vitiseg::error::{Error, Result};
use vitiseg::imaging::{read_mask, write_mask, DEFAULT_THRESHOLD};
use vitiseg::manifest::{DatasetManifest, ImageRecord, Split};
use vitiseg::nn::checkpoint::{load_model, save_model};
use vitiseg::nn::{NetworkConfig, TrainConfig};
use vitiseg::patching::DEFAULT_RANDOM_COUNT;
use vitiseg::pipeline::{self, TrainMode, TrainOptions, Tiling};
use vitiseg::synth::{self, ColorProfile, ObjectKind, SyntheticSceneSpec};

#[derive(Parser)]
#[command(name = "vitiseg", version, args_override_self = true, about = "Segment, count and measure small objects in field images")]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on one thread so every reduction happens in a fixed order
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth
    Synth(SynthArgs),
    /// Turn annotation files into ground-truth masks
    Rasterize(RasterizeArgs),
    /// Train a network on a manifest's training split
    Train(TrainArgs),
    /// Predict probability maps and masks with a trained model
    Segment(SegmentArgs),
    /// Label, cluster and measure the objects in masks
    Analyze(AnalyzeArgs),
    /// Score predicted masks against the evaluation split
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Disc,
    PolygonBlob,
    Line,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Easy,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "5-cover")]
    FiveCover,
    #[value(name = "5-cover-da")]
    FiveCoverDa,
    AllCover,
    AllRandDa,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::FiveCover => TrainMode::FiveCover,
            ModeArg::FiveCoverDa => TrainMode::FiveCoverDa,
            ModeArg::AllCover => TrainMode::AllCover,
            ModeArg::AllRandDa => TrainMode::AllRandDa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TilingArg {
    Adjacent,
    Overlap50,
}

impl From<TilingArg> for Tiling {
    fn from(t: TilingArg) -> Self {
        match t {
            TilingArg::Adjacent => Tiling::Adjacent,
            TilingArg::Overlap50 => Tiling::Overlap50,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    /// VGG16 encoder with 224 px input
    Vgg16,
    /// Narrow five-block network with 64 px input
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    Test,
    All,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Full scene spec as JSON; other flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    count_min: Option<usize>,
    #[arg(long)]
    count_max: Option<usize>,
    /// Disc radius, blob radius or line length (lower bound)
    #[arg(long)]
    size_min: Option<f64>,
    #[arg(long)]
    size_max: Option<f64>,
    #[arg(long)]
    stroke_width: Option<f64>,
    /// Pixel noise standard deviation (8-bit units)
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    min_gap: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RasterizeArgs {
    /// Rasterize every annotated record of this manifest
    #[arg(long, conflicts_with = "annotation", required_unless_present = "annotation")]
    manifest: Option<PathBuf>,
    /// Rasterize a single annotation file
    #[arg(long)]
    annotation: Option<PathBuf>,
    /// Circle radius for annotation files that do not carry one
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "vgg16")]
    arch: ArchArg,
    #[arg(long, default_value_t = 23)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    /// Loss weight of object pixels
    #[arg(long, default_value_t = 1.0)]
    object_weight: f64,
    /// Random patches per image in all-rand-da mode
    #[arg(long, default_value_t = DEFAULT_RANDOM_COUNT)]
    random_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "overlap50")]
    tiling: TilingArg,
    /// Binarization threshold on the 0-255 background-probability scale
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: u8,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Supplies default parameters; without --masks its ground truth is analyzed
    #[arg(long, required_unless_present = "masks")]
    manifest: Option<PathBuf>,
    /// Directory of <id>.png masks
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    min_region_size: Option<usize>,
    #[arg(long)]
    cluster_dist: Option<f64>,
    /// Add the pedicel length table (default: when the dataset holds lines)
    #[arg(long)]
    pedicels: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted <id>.png masks
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    min_region_size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // help and version output
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let reason = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", reason.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Rasterize(a) => rasterize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    write_text(path, &(text + "\n"))
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?
        }
        None => SyntheticSceneSpec::default(),
    };
    if let Some(v) = a.name {
        spec.name = v;
    }
    if let Some(k) = a.kind {
        spec.kind = match k {
            KindArg::Disc => ObjectKind::Disc,
            KindArg::PolygonBlob => ObjectKind::PolygonBlob,
            KindArg::Line => ObjectKind::Line,
        };
    }
    if let Some(p) = a.profile {
        spec.profile = match p {
            ProfileArg::Easy => ColorProfile::Easy,
            ProfileArg::Hard => ColorProfile::Hard,
        };
    }
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag { $field = v; })*
        };
    }
    set!(
        width => spec.width,
        height => spec.height,
        channels => spec.channels,
        count_min => spec.count_range.0,
        count_max => spec.count_range.1,
        size_min => spec.size_range.0,
        size_max => spec.size_range.1,
        stroke_width => spec.stroke_width,
        noise => spec.noise,
        min_gap => spec.min_gap,
        train_images => spec.train_images,
        eval_images => spec.eval_images,
        test_images => spec.test_images,
        seed => spec.seed,
    );
    let manifest = synth::write_dataset(&spec, &a.out_dir)?;
    println!(
        "wrote {} images to {}",
        manifest.records.len(),
        a.out_dir.join("manifest.json").display()
    );
    Ok(())
}

fn rasterize_cmd(a: RasterizeArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    let mut jobs: Vec<(String, AnnotationSet)> = Vec::new();
    if let Some(path) = &a.annotation {
        let mut set = AnnotationSet::load(path)?;
        if set.radius.is_none() {
            set.radius = a.radius;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mask").to_string();
        jobs.push((stem, set));
    } else if let Some(path) = &a.manifest {
        let manifest = DatasetManifest::load(path)?;
        for r in &manifest.records {
            if let Some(mut set) = manifest.load_annotation(r)? {
                if set.radius.is_none() {
                    set.radius = a.radius;
                }
                jobs.push((r.id.clone(), set));
            }
        }
    }
    for (id, set) in &jobs {
        let mask = set
            .rasterize()
            .map_err(|e| Error::Validation(format!("{id}: {e}")))?;
        write_mask(&mask, a.out_dir.join(format!("{id}.png")))?;
    }
    println!("rasterized {} annotation files into {}", jobs.len(), a.out_dir.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let channels = manifest.params.channels;
    let opts = TrainOptions {
        mode: a.mode.into(),
        network: match a.arch {
            ArchArg::Vgg16 => NetworkConfig::vgg16(channels),
            ArchArg::Toy => NetworkConfig::toy(channels),
        },
        train: TrainConfig {
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            momentum: a.momentum,
            seed: a.seed,
            object_weight: a.object_weight,
        },
        random_count: a.random_count,
    };
    create_dir(&a.out_dir)?;
    let outcome = pipeline::train_from_manifest(&manifest, &opts, |epoch, cost| {
        eprintln!("epoch {epoch}/{} cost {cost:.6}", opts.train.epochs);
    })?;
    let model_path = a.out_dir.join("model.vsm");
    save_model(&outcome.model, &model_path)?;
    write_text(&a.out_dir.join("cost.csv"), &outcome.report.to_csv())?;
    write_json(
        &a.out_dir.join("train.json"),
        &json!({
            "manifest": a.manifest,
            "options": opts,
            "patch_count": outcome.patch_count,
            "cost_history": outcome.report.cost_history,
        }),
    )?;
    println!(
        "trained on {} patches; model written to {}",
        outcome.patch_count,
        model_path.display()
    );
    Ok(())
}

fn select_records(manifest: &DatasetManifest, split: SplitArg) -> Vec<&ImageRecord> {
    let want = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Eval => Some(Split::Eval),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    manifest
        .records
        .iter()
        .filter(|r| want.is_none_or(|s| r.split == s))
        .collect()
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let model = load_model(&a.model)?;
    let records = select_records(&manifest, a.split);
    let tiling: Tiling = a.tiling.into();
    let done = pipeline::segment_records(&model, &manifest, &records, tiling, a.threshold, &a.out_dir)?;
    write_json(
        &a.out_dir.join("segment.json"),
        &json!({
            "model": a.model,
            "tiling": tiling,
            "threshold": a.threshold,
            "images": done,
        }),
    )?;
    println!(
        "segmented {} images ({} tiles) into {}",
        done.len(),
        done.iter().map(|s| s.tiles).sum::<usize>(),
        a.out_dir.display()
    );
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    let manifest = a.manifest.as_ref().map(DatasetManifest::load).transpose()?;
    let min_region_size = a
        .min_region_size
        .or(manifest.as_ref().map(|m| m.params.min_region_size))
        .ok_or_else(|| Error::InvalidParameter("--min-region-size is required without --manifest".into()))?;
    let cluster_dist = a
        .cluster_dist
        .or(manifest.as_ref().map(|m| m.params.cluster_distance_threshold))
        .ok_or_else(|| Error::InvalidParameter("--cluster-dist is required without --manifest".into()))?;
    let pedicels = a.pedicels || manifest.as_ref().and_then(|m| m.params.kind) == Some(PrimitiveKind::Line);

    let masks = match (&a.masks, &manifest) {
        (Some(dir), _) => pipeline::masks_in_dir(dir)?
            .into_iter()
            .map(|(id, path)| Ok((id, read_mask(path)?)))
            .collect::<Result<Vec<_>>>()?,
        (None, Some(m)) => m
            .records
            .iter()
            .filter(|r| r.has_ground_truth())
            .map(|r| Ok((r.id.clone(), m.ground_truth(r)?)))
            .collect::<Result<Vec<_>>>()?,
        (None, None) => unreachable!("clap requires --manifest or --masks"),
    };
    let params = AnalysisParams::new(min_region_size, cluster_dist);
    let reports = pipeline::analyze_masks(&masks, &params, pedicels)?;
    create_dir(&a.out_dir)?;
    let mut summary = String::from("image_id,object_count,cluster_count\n");
    for r in &reports {
        write_json(&a.out_dir.join(format!("{}.json", r.image_id)), r)?;
        summary.push_str(&format!("{},{},{}\n", r.image_id, r.object_count, r.clusters.cluster_count));
    }
    write_text(&a.out_dir.join("summary.csv"), &summary)?;
    println!(
        "analyzed {} masks: {} objects",
        reports.len(),
        reports.iter().map(|r| r.object_count).sum::<usize>()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let tolerance = a.tolerance.unwrap_or(manifest.params.tolerance);
    let min_region_size = a.min_region_size.unwrap_or(manifest.params.min_region_size);
    let report = pipeline::evaluate_dir(&manifest, &a.predictions, min_region_size, tolerance)?;
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("evaluation.csv"), &report.to_csv())?;
    write_json(&a.out_dir.join("evaluation.json"), &report)?;
    let m = &report.mean;
    println!(
        "images {} iou0 {:.4} iou1 {:.4} miou {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        report.images.len(),
        m.iou0,
        m.iou1,
        m.miou,
        m.precision,
        m.recall,
        m.f1
    );
    Ok(())
}
