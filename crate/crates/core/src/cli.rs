use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use qarv::ablate::{run_ablation, write_ablation_csv, AblationAxis, AblationRow};
use qarv::codec::{compress, decompress, CompressedImage, DecodeMode};
use qarv::image::RgbImage;
use qarv::metrics::{
    bd_rate, bpp, curve_from_rows, psnr, rd_sweep, read_sweep_csv, write_sweep_csv,
};
use qarv::model::{ModelConfig, Qarv, Weights};
use qarv::nn::checkpoint::Checkpoint;
use qarv::train::{
    read_named, synthetic_textures, write_images, Dataset, LogRecord, TrainConfig, Trainer,
};

#[derive(Parser, Debug)]
#[command(name = "qarv", version, about = "Variable-rate learned image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a flat JSON config.
    Train(TrainArgs),
    /// Compress a PPM/PGM image.
    Compress(CompressArgs),
    /// Decompress a .qarv file to PPM.
    Decompress(DecompressArgs),
    /// Rate-distortion sweep over a directory of images.
    Sweep(SweepArgs),
    /// BD-rate of a test sweep CSV against an anchor sweep CSV, in percent.
    Bdrate(BdrateArgs),
    /// Train config variants along one axis and tabulate the results.
    Ablate(AblateArgs),
    /// Write a seeded synthetic texture dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat JSON with training, model, and dataset fields.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `data_dir`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    /// Use raw instead of EMA weights.
    #[arg(long)]
    pub raw: bool,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// full, progressive:i, loo:i, or disjoint:i (1-based).
    #[arg(long, default_value = "full")]
    pub mode: DecodeMode,
    /// Original image; prints PSNR when given.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub raw: bool,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "*.p[pg]m")]
    pub pattern: String,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', default_value = "16,128,2048")]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct BdrateArgs {
    pub anchor: PathBuf,
    pub test: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Base config; defaults to the tiny preset and default training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// block-config, affine-position, norm-type, or lambda-range.
    #[arg(long)]
    pub axis: AblationAxis,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Number of dataset images (in name order) used for evaluation.
    #[arg(long, default_value_t = 8)]
    pub eval_count: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,256,512")]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Dataset location and output directory for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFields {
    pub data_dir: Option<PathBuf>,
    pub pattern: String,
    pub out_dir: Option<PathBuf>,
    /// Starting point for model fields; explicit fields override it.
    pub preset: String,
}

impl Default for RunFields {
    fn default() -> Self {
        RunFields {
            data_dir: None,
            pattern: "*.p[pg]m".into(),
            out_dir: None,
            preset: "qarv-tiny".into(),
        }
    }
}

/// One flat JSON object split into its model, training, and run parts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunFields,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let Value::Object(input) = serde_json::from_str(text)? else {
            bail!("config must be a JSON object");
        };
        let keys_of = |v: Value| match v {
            Value::Object(m) => m,
            _ => unreachable!("structs serialize to objects"),
        };
        let train_keys = keys_of(serde_json::to_value(TrainConfig::default())?);
        let run_keys = keys_of(serde_json::to_value(RunFields::default())?);
        let mut run_part = Map::new();
        for (k, v) in &input {
            if run_keys.contains_key(k) {
                run_part.insert(k.clone(), v.clone());
            }
        }
        let run: RunFields = serde_json::from_value(Value::Object(run_part))?;
        let mut model_part = keys_of(serde_json::to_value(ModelConfig::preset(&run.preset)?)?);
        let mut train_part = Map::new();
        for (k, v) in input {
            if model_part.contains_key(&k) {
                model_part.insert(k, v);
            } else if train_keys.contains_key(&k) {
                train_part.insert(k, v);
            } else if !run_keys.contains_key(&k) {
                bail!("unknown config key '{k}'");
            }
        }
        let model: ModelConfig = serde_json::from_value(Value::Object(model_part))?;
        model.validate()?;
        let train = serde_json::from_value(Value::Object(train_part))?;
        Ok(RunConfig { model, train, run })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flat JSON equivalent to this config.
    pub fn to_json(&self) -> Result<String> {
        let mut out = Map::new();
        for v in [
            serde_json::to_value(&self.run)?,
            serde_json::to_value(&self.model)?,
            serde_json::to_value(&self.train)?,
        ] {
            if let Value::Object(m) = v {
                out.extend(m);
            }
        }
        Ok(serde_json::to_string_pretty(&Value::Object(out))?)
    }
}

fn load_model(ckpt: &Path, raw: bool) -> Result<Qarv<f32>> {
    let weights = if raw { Weights::Raw } else { Weights::Ema };
    Ok(Qarv::load(ckpt, weights)?)
}

fn log_line(r: &LogRecord) {
    println!(
        "iter {:>7}  loss {:.5}  bpp {:.4}  psnr {:.2}  lambda {:.1}  lr {:.3e}",
        r.iteration + 1,
        r.loss,
        r.rate_bpp,
        r.psnr,
        r.lambda,
        r.lr
    );
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.data_dir {
        cfg.run.data_dir = Some(d);
    }
    if let Some(o) = a.out {
        cfg.run.out_dir = Some(o);
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data_dir = cfg
        .run
        .data_dir
        .clone()
        .context("no data_dir in config or --data-dir")?;
    let out_dir = cfg
        .run
        .out_dir
        .clone()
        .context("no out_dir in config or --out")?;
    let data = Dataset::from_dir(&data_dir, &cfg.run.pattern)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?, cfg.train.clone())?,
        None => Trainer::new(Qarv::new(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    if trainer.model().config() != &cfg.model {
        bail!(
            "checkpoint model config differs from {}",
            a.config.display()
        );
    }
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let resolved = out_dir.join("config.json");
    std::fs::write(&resolved, cfg.to_json()?)
        .with_context(|| format!("writing {}", resolved.display()))?;
    println!(
        "training {} parameters on {} images for {} iterations",
        trainer.model().num_parameters(),
        data.len(),
        cfg.train.iterations
    );
    trainer.run(&data, Some(&out_dir), log_line)?;
    println!("wrote {}", out_dir.join("final.ckpt").display());
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let model = load_model(&a.ckpt, a.raw)?;
    let img = RgbImage::read(&a.input)?;
    let enc = compress(&model, &img.to_tensor(), a.lambda)?;
    let bytes = enc.container.to_bytes()?;
    std::fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    println!("bpp {:.4}", bpp(bytes.len(), img.width, img.height));
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> Result<()> {
    let model = load_model(&a.ckpt, a.raw)?;
    let bytes =
        std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let container = CompressedImage::from_bytes(&bytes)?;
    let dec = decompress(&model, &container, a.mode)?;
    let out = RgbImage::from_tensor(&dec.image)?;
    out.write_ppm(&a.output)?;
    if let Some(r) = a.reference {
        let reference = RgbImage::read(&r)?;
        println!(
            "psnr {:.4}",
            psnr(&reference.to_tensor::<f64>(), &out.to_tensor::<f64>())?
        );
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let model = load_model(&a.ckpt, a.raw)?;
    let images = read_named(&a.data_dir, &a.pattern)?;
    let (curve, rows) = rd_sweep(&model, &images, &a.lambdas)?;
    write_sweep_csv(&a.out, &rows)?;
    for p in curve.points() {
        println!(
            "lambda {:>8.1}  bpp {:.4}  psnr {:.3}",
            p.lambda, p.bpp, p.psnr
        );
    }
    Ok(())
}

fn cmd_bdrate(a: BdrateArgs) -> Result<()> {
    let anchor = curve_from_rows(&read_sweep_csv(&a.anchor)?);
    let test = curve_from_rows(&read_sweep_csv(&a.test)?);
    println!("{:.2}", bd_rate(&anchor, &test)?);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json("{}")?,
    };
    if let Some(d) = a.data_dir {
        cfg.run.data_dir = Some(d);
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let data_dir = cfg
        .run
        .data_dir
        .clone()
        .context("no data_dir in config or --data-dir")?;
    let named = read_named(&data_dir, &cfg.run.pattern)?;
    let eval: Vec<_> = named.iter().take(a.eval_count.max(1)).cloned().collect();
    let data = Dataset::new(named.into_iter().map(|(_, im)| im).collect())?;
    println!("{}", AblationRow::CSV_HEADER);
    let rows = run_ablation(
        a.axis,
        &cfg.model,
        &cfg.train,
        &data,
        &eval,
        &a.lambdas,
        |r| println!("{}", r.csv_row()),
    )?;
    write_ablation_csv(&a.out, &rows)?;
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    write_images(&a.out, &synthetic_textures(a.count, a.size, a.seed))?;
    println!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bdrate(a) => cmd_bdrate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}
