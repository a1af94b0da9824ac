use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use attrsearch_core::engine::{self, GalleryIndex};
use attrsearch_core::model::Model;
use attrsearch_core::service::{self, ServiceState};
use attrsearch_core::synthgen::{self, AttributeSchema, Dataset, GenConfig};
use attrsearch_core::trainer::{self, TrainConfig, Variant};
use attrsearch_core::{Error, Result};

/// Attribute-manipulation image retrieval on a synthetic garment dataset.
#[derive(Parser, Debug)]
#[command(name = "attrsearch", version)]
struct Cli {
    /// JSON file supplying defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset directory (images, manifest, schema, split).
    GenData(GenDataArgs),
    /// Run the three training stages for one variant.
    Train(TrainArgs),
    /// Represent the gallery split and write an index.
    Index(IndexArgs),
    /// Retrieve the Top-K gallery images for one manipulation.
    Query(QueryArgs),
    /// Top-K accuracy over every available manipulation of the query split.
    Eval(EvalArgs),
    /// Train and evaluate several variants over several seeds.
    Ablate(AblateArgs),
    /// Write activation-map PNGs and box records for one image.
    Explain(ExplainArgs),
    /// Serve the HTTP API over a checkpoint and index.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total number of images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    gallery: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tie bottom-shape to top-shape in half of the images.
    #[arg(long)]
    correlated: bool,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage3_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    image: String,
    /// Manipulation as `attribute=value`.
    #[arg(long = "set")]
    set: String,
    #[arg(short)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(short, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Also write the accuracy table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(short, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Directory for the table CSV and per-run checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Values a `--config` file may supply.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    variant: Option<Variant>,
    variants: Option<Vec<Variant>>,
    k: Option<Vec<usize>>,
    port: Option<u16>,
    size: Option<usize>,
    queries: Option<usize>,
    gallery: Option<usize>,
    train: Option<TrainConfig>,
}

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| Error::Usage(format!("--{name} is required (as a flag or in --config)")))
}

fn train_config(base: &Option<TrainConfig>, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = base.clone().unwrap_or_default();
    if let Some(e) = flags.stage1_epochs {
        cfg.stage1_epochs = e;
    }
    if let Some(e) = flags.stage2_epochs {
        cfg.stage2_epochs = e;
    }
    if let Some(e) = flags.stage3_epochs {
        cfg.stage3_epochs = e;
    }
    if let Some(lr) = flags.learning_rate {
        cfg.sgd.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_index(path: &Path, model: &Model) -> Result<GalleryIndex> {
    let index = GalleryIndex::load(path)?;
    index.check_version(model)?;
    Ok(index)
}

fn parse_set(schema: &AttributeSchema, set: &str) -> Result<(usize, usize)> {
    let (attr, value) =
        set.split_once('=').ok_or_else(|| Error::Usage(format!("--set expects attribute=value, got '{set}'")))?;
    let a = schema.attribute_index(attr).ok_or_else(|| Error::Argument(format!("unknown attribute '{attr}'")))?;
    let v = schema
        .value_index(a, value)
        .ok_or_else(|| Error::Argument(format!("attribute '{attr}' has no value '{value}'")))?;
    Ok((a, v))
}

fn run(cli: Cli) -> Result<()> {
    let file: FileConfig = match &cli.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::GenData(args) => {
            let out = required(args.out, file.out, "out")?;
            let queries = args.queries.or(file.queries).unwrap_or(500);
            let gallery = args.gallery.or(file.gallery).unwrap_or(2000);
            let size = args.size.or(file.size).unwrap_or(queries + gallery + 5000);
            let seed = args.seed.or(file.seed).unwrap_or(0);
            let schema = AttributeSchema::default();
            let config = GenConfig { correlated: args.correlated, ..GenConfig::default() };
            let images = synthgen::generate_dataset_with(&schema, size, seed, &config)?;
            let split = synthgen::split(&images, queries, gallery, seed)?;
            Dataset { schema, images, split }.write_dir(&out)?;
            println!("wrote {size} images to {}", out.display());
        }
        Command::Train(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let variant = args.variant.or(file.variant).unwrap_or(Variant::Full);
            let seed = args.seed.or(file.seed).unwrap_or(0);
            let out = required(args.out, file.out, "out")?;
            let cfg = train_config(&file.train, &args.train)?;
            let (model, report) = trainer::train(&data, variant, &cfg, seed)?;
            model.save(&out, Some(variant.to_string()))?;
            let mut report_path = out.clone().into_os_string();
            report_path.push(".report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::Usage(format!("{}: {e}", PathBuf::from(&report_path).display())))?;
            println!("saved {variant} checkpoint {} (version {})", out.display(), model.version());
        }
        Command::Index(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let (model, _) = Model::load(&required(args.checkpoint, file.checkpoint, "checkpoint")?)?;
            let out = required(args.out, file.index.or(file.out), "out")?;
            let index = engine::index_gallery(&model, &data.subset(&data.split.gallery)?)?;
            index.save(&out, &model.schema)?;
            println!("indexed {} gallery images into {}", index.len(), out.display());
        }
        Command::Query(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let (model, _) = Model::load(&required(args.checkpoint, file.checkpoint, "checkpoint")?)?;
            let index = load_index(&required(args.index, file.index, "index")?, &model)?;
            let image = data.get(&args.image).ok_or_else(|| Error::Argument(format!("unknown image id '{}'", args.image)))?;
            let (a, v) = parse_set(&model.schema, &args.set)?;
            let k = args.k.or(file.k.and_then(|k| k.first().copied())).unwrap_or(10);
            let result = engine::query(&model, &index, image, a, v, k)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Eval(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let (model, _) = Model::load(&required(args.checkpoint, file.checkpoint, "checkpoint")?)?;
            let index = load_index(&required(args.index, file.index, "index")?, &model)?;
            let ks = args.k.or(file.k).unwrap_or_else(|| vec![10, 20, 30]);
            let report = engine::evaluate(&model, &index, &data.subset(&data.split.query)?, &ks)?;
            print!("{}", report.to_csv());
            if let Some(path) = args.csv {
                std::fs::write(&path, report.to_csv()).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Ablate(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let variants = args.variants.or(file.variants).unwrap_or_else(|| Variant::ALL.to_vec());
            let seeds = args.seeds.or(file.seeds).unwrap_or_else(|| vec![0, 1, 2]);
            let ks = args.k.or(file.k).unwrap_or_else(|| vec![10, 20, 30]);
            let out = args.out.or(file.out);
            let cfg = train_config(&file.train, &args.train)?;
            let table = trainer::ablation_run(&data, &variants, &ks, &seeds, &cfg, |variant, seed, model, _| {
                match &out {
                    Some(dir) => model.save(&dir.join(format!("{variant}-seed{seed}.ckpt")), Some(variant.to_string())),
                    None => Ok(()),
                }
            })?;
            println!("{}", table.render());
            if let Some(dir) = &out {
                let path = dir.join("ablation.csv");
                std::fs::write(&path, table.to_csv()).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Explain(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let (model, _) = Model::load(&required(args.checkpoint, file.checkpoint, "checkpoint")?)?;
            let image = data.get(&args.image).ok_or_else(|| Error::Argument(format!("unknown image id '{}'", args.image)))?;
            let out = args.out.or(file.out).unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out).map_err(|e| Error::Usage(format!("{}: {e}", out.display())))?;
            let mut records = Vec::new();
            for (a, attr) in model.schema.attributes.iter().enumerate() {
                let (record, png) = model.explain(&image.id, &image.pixels, a)?;
                let path = out.join(format!("{}-{}.png", image.id, attr.name));
                png.save(&path)?;
                records.push(record);
            }
            let path = out.join(format!("{}-aam.json", image.id));
            std::fs::write(&path, serde_json::to_string_pretty(&records)?)
                .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            println!("{}", serde_json::to_string_pretty(&records)?);
        }
        Command::Serve(args) => {
            let data = Dataset::read_dir(&required(args.data, file.data, "data")?)?;
            let (model, _) = Model::load(&required(args.checkpoint, file.checkpoint, "checkpoint")?)?;
            let index = GalleryIndex::load(&required(args.index, file.index, "index")?)?;
            let port = args.port.or(file.port).unwrap_or(8080);
            let state = ServiceState::new(model, index, data)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Usage(format!("tokio runtime: {e}")))?;
            runtime
                .block_on(service::serve(state, port))
                .map_err(|e| Error::Usage(format!("server: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
