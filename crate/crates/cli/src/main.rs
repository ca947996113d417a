mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use legoformer::cp_fit::cp_fit_oracle;
use legoformer::eval::{evaluate_sweep, export_attention, part_analysis, ParallelReconstructor};
use legoformer::image::GrayImage;
use legoformer::model::checkpoint::load_checkpoint;
use legoformer::model::{parameter_count, LegoFormer, PredictOptions, Variant};
use legoformer::seed::{derive_seed, Stream};
use legoformer::synth::{build_dataset, Dataset, LoadedObject, Split};
use legoformer::trainer::{Trainer, ViewPolicy, LOG_HEADER};
use legoformer::voxel::threshold;
use legoformer::{Error, OccupancyGrid};

use config::{RunConfig, SplitChoice};

/// Multi-view voxel reconstruction with rank-1 factor decoding.
#[derive(Parser, Debug)]
#[command(name = "legoformer", version)]
struct Cli {
    /// key=value configuration file (dotted keys such as model.d_model=64).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable internal parallelism.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic dataset.
    GenerateData(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint over several view counts.
    Eval(EvalArgs),
    /// Reconstruct one object from view images.
    Reconstruct(ReconstructArgs),
    /// Fit k rank-1 factors to a voxel file.
    Decompose(DecomposeArgs),
    /// Write attention maps for one dataset object.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    image: Option<usize>,
    /// depth or silhouette.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// m (multi-view) or s (single-view).
    #[arg(long)]
    variant: Option<String>,
    /// factors, naive, naive-nar or naive-full.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    share_weights: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Fixed number of training views per object.
    #[arg(long)]
    views: Option<usize>,
    /// Draw the view count uniformly from 1..max-views instead.
    #[arg(long)]
    max_views: Option<usize>,
    /// adagrad or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated view counts.
    #[arg(long)]
    views: Option<String>,
    /// train, test or all.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    fscore_distance: Option<f64>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// View images (PGM), comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    images: Vec<PathBuf>,
    /// Also write each query's unclipped rank-1 grid.
    #[arg(long)]
    parts: bool,
    /// Also write captured attention as JSON.
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    tau: Option<f32>,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    voxels: PathBuf,
    #[arg(long)]
    k: i64,
    #[arg(long, default_value_t = legoformer::cp_fit::DEFAULT_ITERATIONS)]
    iterations: usize,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Object id; defaults to the first object in the manifest.
    #[arg(long)]
    object: Option<String>,
    #[arg(long, default_value_t = 4)]
    views: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Io { .. } | Error::Format { .. }) => 3,
        Some(Error::NonFiniteLoss { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text, path)?;
    }
    let mut over: Vec<(&str, String)> = Vec::new();
    let mut put = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            over.push((k, v));
        }
    };
    put("seed", cli.seed.map(|v| v.to_string()));
    put("out", cli.out.as_ref().map(|p| p.display().to_string()));
    put("threads", cli.threads.map(|v| v.to_string()));
    if cli.deterministic {
        put("deterministic", Some("true".into()));
    }
    let s = |v: Option<usize>| v.map(|x| x.to_string());
    match &cli.command {
        Command::GenerateData(a) => {
            put("data.objects", s(a.objects));
            put("data.grid", s(a.grid));
            put("data.views", s(a.views));
            put("data.image", s(a.image));
            put("data.mode", a.mode.clone());
            put(
                "data.train_fraction",
                a.train_fraction.map(|v| v.to_string()),
            );
        }
        Command::Train(a) => {
            put("model.variant", a.variant.clone());
            put("model.scheme", a.scheme.clone());
            put("model.n_queries", s(a.queries));
            put("model.n_layers", s(a.layers));
            put("model.n_heads", s(a.heads));
            put("model.d_model", s(a.d_model));
            put("model.ff_dim", s(a.ff_dim));
            if a.share_weights {
                put("model.share_layer_weights", Some("true".into()));
            }
            put("train.steps", s(a.steps));
            put("train.batch", s(a.batch));
            put("train.lr", a.lr.map(|v| v.to_string()));
            put("train.warmup", s(a.warmup));
            put("train.views", s(a.views));
            put("train.max_views", s(a.max_views));
            put("train.optimizer", a.optimizer.clone());
            put("train.checkpoint_every", s(a.checkpoint_every));
            put("train.eval_every", s(a.eval_every));
        }
        Command::Eval(a) => {
            put("eval.views", a.views.clone());
            put("eval.split", a.split.clone());
            put("eval.tau", a.tau.map(|v| v.to_string()));
            put(
                "eval.fscore_distance",
                a.fscore_distance.map(|v| v.to_string()),
            );
        }
        Command::Reconstruct(a) => put("eval.tau", a.tau.map(|v| v.to_string())),
        Command::Decompose(_) | Command::DumpAttention(_) => {}
    }
    for (k, v) in over {
        cfg.set(k, &v)?;
    }
    if let Command::Train(a) = &cli.command {
        if a.views.is_some() && a.max_views.is_some() {
            return Err(config_err("--views and --max-views are mutually exclusive"));
        }
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Prints the effective configuration and stores it in the output directory.
fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    create_dir(&cfg.out)?;
    let text = format!("# {command}\n{}", cfg.render());
    print!("{text}");
    write(&cfg.out.join("effective_config.txt"), text)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    match cli.command {
        Command::GenerateData(_) => cmd_generate(&cfg),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Reconstruct(a) => cmd_reconstruct(&cfg, &a),
        Command::Decompose(a) => cmd_decompose(&cfg, &a),
        Command::DumpAttention(a) => cmd_dump(&cfg, &a),
    }
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let dc = cfg.dataset_config();
    dc.validate()?;
    echo_config(cfg, "generate-data")?;
    let manifest = build_dataset(&dc, &cfg.out)?;
    let train = manifest
        .objects
        .iter()
        .filter(|o| o.split == Split::Train)
        .count();
    println!(
        "wrote {} ({} objects: {} train, {} test)",
        cfg.out
            .join(legoformer::synth::dataset::MANIFEST_FILE)
            .display(),
        manifest.objects.len(),
        train,
        manifest.objects.len() - train
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    // Grid and image sizes always follow the dataset.
    let mut cfg = cfg.clone();
    cfg.model.grid_side = ds.manifest.grid_side;
    if let Some(img) = ds.objects.first().and_then(|o| o.views.first()) {
        cfg.model.image_side = img.width();
    }
    let cfg = &cfg;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let mut train_cfg = cfg.train.clone();
    if cfg.model.variant == Variant::SingleView {
        if args.views.is_some_and(|v| v > 1) || args.max_views.is_some() {
            return Err(config_err(
                "the single-view variant trains on exactly 1 view",
            ));
        }
        train_cfg.views = ViewPolicy::Fixed(1);
    }
    train_cfg.seed = cfg.seed;
    echo_config(cfg, "train")?;
    let data = ds.split(Split::Train);
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, Some(&cfg.model))?;
            Trainer::resume(ckpt, data, train_cfg)?
        }
        None => {
            let model = LegoFormer::new(cfg.model.clone(), derive_seed(cfg.seed, Stream::Init, 0))?;
            Trainer::new(model, data, train_cfg)?
        }
    };
    println!(
        "model: {} parameters, starting at step {}",
        parameter_count(&cfg.model),
        trainer.step_count()
    );
    let log_path = cfg.out.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{LOG_HEADER}").with_context(|| log_path.display().to_string())?;
    let outcome = trainer.run(
        Some(&cfg.out),
        |row| {
            let _ = writeln!(log, "{}", row.csv_line());
        },
        |step, iou| println!("step {step}: mean train IoU {iou:.4}"),
    );
    log.flush().map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let outcome = outcome?;
    if let Some(last) = outcome.log.last() {
        println!("final loss {} at step {}", last.loss, last.step);
    }
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn select_split(ds: &Dataset, split: SplitChoice) -> Vec<&LoadedObject> {
    match split {
        SplitChoice::Train => ds.split(Split::Train),
        SplitChoice::Test => ds.split(Split::Test),
        SplitChoice::All => ds.objects.iter().collect(),
    }
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    cfg.eval.validate()?;
    echo_config(cfg, "eval")?;
    let model = load_checkpoint(&args.checkpoint, None)?.model;
    let ds = load_dataset(&args.data)?;
    let objects = select_split(&ds, cfg.eval_split);
    let threads = if cfg.deterministic {
        1
    } else {
        cfg.threads.max(1)
    };
    let report = evaluate_sweep(
        &ParallelReconstructor::new(&model, threads),
        &args.checkpoint.display().to_string(),
        &args.data.display().to_string(),
        &objects,
        &cfg.eval,
    )?;
    write(&cfg.out.join("report.json"), report.to_json())?;
    println!("{:>6} {:>10} {:>10}", "views", "mean_iou", "mean_f");
    for r in &report.per_view_count {
        println!(
            "{:>6} {:>10.4} {:>10.4}",
            r.views, r.mean_iou, r.mean_fscore
        );
    }
    Ok(())
}

fn read_images(paths: &[PathBuf]) -> Result<Vec<GrayImage>> {
    Ok(paths
        .iter()
        .map(|p| GrayImage::read(p))
        .collect::<Result<Vec<_>, _>>()?)
}

fn cmd_reconstruct(cfg: &RunConfig, args: &ReconstructArgs) -> Result<()> {
    echo_config(cfg, "reconstruct")?;
    let model = load_checkpoint(&args.checkpoint, None)?.model;
    let views = read_images(&args.images)?;
    let opts = PredictOptions {
        capture: args.attention,
        teacher: None,
    };
    let pred = model.predict(&views, opts)?;
    let grid = threshold(&pred.grid, cfg.eval.tau)?;
    let out = cfg.out.join("reconstruction.voxg");
    grid.write(&out)?;
    println!(
        "wrote {} ({} occupied voxels)",
        out.display(),
        grid.occupied()
    );
    if args.parts {
        let analysis = part_analysis(&model, &views, cfg.eval.tau)?;
        let dir = cfg.out.join("parts");
        create_dir(&dir)?;
        // Unclipped rank-1 grids: thresholding their clipped sum gives the main output.
        for (i, part) in analysis.rank1.iter().enumerate() {
            part.write(&dir.join(format!("part-{i:02}.voxg")))?;
        }
        println!("wrote {} parts to {}", analysis.rank1.len(), dir.display());
    }
    if args.attention {
        let path = cfg.out.join("attention.json");
        write(&path, export_attention(&pred.attention)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_decompose(cfg: &RunConfig, args: &DecomposeArgs) -> Result<()> {
    if args.k < 1 {
        return Err(config_err(format!("k must be >= 1, got {}", args.k)));
    }
    echo_config(cfg, "decompose")?;
    let grid = OccupancyGrid::read(&args.voxels)?;
    if !grid.is_binary() {
        return Err(config_err(format!(
            "{} is not a binary voxel grid",
            args.voxels.display()
        )));
    }
    let fit = cp_fit_oracle(&grid, args.k as usize, args.iterations, cfg.seed)?;
    let f = &fit.factors;
    let doc = json!({
        "side": f.side(),
        "k": f.k(),
        "iou": fit.iou,
        "loss": fit.loss,
        "z": f.z(),
        "y": f.y(),
        "x": f.x(),
    });
    let path = cfg.out.join("factors.json");
    write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("iou {}", fit.iou);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_dump(cfg: &RunConfig, args: &DumpArgs) -> Result<()> {
    echo_config(cfg, "dump-attention")?;
    let model = load_checkpoint(&args.checkpoint, None)?.model;
    let ds = load_dataset(&args.data)?;
    let obj = match &args.object {
        Some(id) => ds
            .objects
            .iter()
            .find(|o| &o.entry.id == id)
            .ok_or_else(|| config_err(format!("no object {id} in dataset")))?,
        None => ds
            .objects
            .first()
            .ok_or_else(|| config_err("dataset is empty"))?,
    };
    if args.views == 0 || args.views > obj.views.len() {
        return Err(config_err(format!(
            "object {} has {} views, asked for {}",
            obj.entry.id,
            obj.views.len(),
            args.views
        )));
    }
    let pred = model.predict(
        &obj.views[..args.views],
        PredictOptions {
            capture: true,
            teacher: None,
        },
    )?;
    let path = cfg.out.join("attention.json");
    write(&path, export_attention(&pred.attention)?)?;
    println!(
        "wrote {} ({} records)",
        path.display(),
        pred.attention.len()
    );
    Ok(())
}
