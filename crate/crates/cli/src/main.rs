//! `bvap`: train, predict, evaluate and ablate attention models from the
//! command line. Every output is a file; diagnostics go to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bvap::checkpoint::{load_checkpoint, save_checkpoint};
use bvap::config::RunConfig;
use bvap::data::{load_image, load_sample, read_manifest, save_map_png, synth_dataset, write_dataset, SampleRecord};
use bvap::metrics::{aggregate, evaluate, pooled_others, MetricRow, REPORT_HEADER};
use bvap::model::{AblationMode, Model};
use bvap::train::{mean_loss, train, TrainHistory};
use bvap::Tensor;
use clap::{Args, Parser, Subcommand};
use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] bvap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "bvap", version, about = "Visual attention prediction: train, predict, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `mode` key (NCF, CF, SF, DCF, DenCF, DenCF+CBP, full).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct DataArgs {
    /// A manifest of `image<TAB>fixations` lines, or `synth`.
    #[arg(long, alias = "manifest")]
    data: String,
    /// Images generated when `--data synth`.
    #[arg(long, default_value_t = 20)]
    synth_count: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write run.cfg, model.ckpt, loss.csv and summary.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the attention map of one image as a PNG at the image's size.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or a directory of map PNGs against a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "maps", conflicts_with = "maps")]
        checkpoint: Option<PathBuf>,
        /// Directory holding `<image_id>.png` maps.
        #[arg(long)]
        maps: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Metric CSV: one row per image and a final `mean` row.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset (PNGs, fixation CSVs, manifest.tsv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check every differentiable op against central differences.
    Gradcheck {
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several modes on one split; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated modes; all seven by default.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, data, out } => cmd_train(&common, &data, &out),
        Command::Predict { common, checkpoint, image, out } => cmd_predict(&common, &checkpoint, &image, &out),
        Command::Eval { common, checkpoint, maps, data, out } => {
            cmd_eval(&common, checkpoint.as_deref(), maps.as_deref(), &data, &out)
        }
        Command::Synth { out, count, size, seed } => {
            let samples: Vec<_> = synth_dataset(count, size, seed)?.into_iter().map(|s| s.record).collect();
            let manifest = write_dataset(&samples, &out)?;
            eprintln!("wrote {count} samples, manifest {}", manifest.display());
            Ok(())
        }
        Command::Gradcheck { out } => cmd_gradcheck(out.as_deref()),
        Command::Ablate { common, data, modes, out } => cmd_ablate(&common, &data, modes.as_deref(), &out),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string()).map_err(CliError::Usage)?;
    }
    if let Some(mode) = &common.mode {
        cfg.set("mode", mode).map_err(CliError::Usage)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| bvap::Error::io(path, e).into())
}

fn load_data(cfg: &RunConfig, data: &DataArgs) -> Result<Vec<SampleRecord>> {
    let size = cfg.model.backbone.base_size;
    if data.data == "synth" {
        let samples = synth_dataset(data.synth_count, size, cfg.train.seed)?;
        return Ok(samples.into_iter().map(|s| s.record).collect());
    }
    let entries = read_manifest(Path::new(&data.data))?;
    let sigma = cfg.density_sigma();
    let loaded = entries
        .par_iter()
        .map(|e| load_sample(&e.image, &e.fixations, size, sigma))
        .collect::<bvap::Result<Vec<_>>>()?;
    for l in &loaded {
        if l.clamped > 0 {
            eprintln!("warning: {}: {} fixation(s) clamped to the border", l.record.fixations.image_id, l.clamped);
        }
    }
    Ok(loaded.into_iter().map(|l| l.record).collect())
}

/// Shuffles with the run seed and holds out `val_fraction` of the samples,
/// keeping at least one for training.
fn split(cfg: &RunConfig, mut samples: Vec<SampleRecord>) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    samples.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len() - 1);
    let val = samples.split_off(samples.len() - n_val);
    (samples, val)
}

fn build_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(p) = &cfg.pretrained {
        bvap::backbone::import_pretrained(&mut model.params, &cfg.model.backbone, p)?;
    }
    Ok(model)
}

/// Loads a checkpoint and checks that it holds exactly the parameters the
/// configured model expects.
fn restore_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let params = load_checkpoint(checkpoint)?;
    let fresh = Model::new(cfg.model.clone(), 0)?;
    for (name, t) in fresh.params.iter() {
        match params.get(name) {
            None => return Err(CliError::Failed(format!("{}: missing parameter {name}", checkpoint.display()))),
            Some(p) if p.dims() != t.dims() => {
                return Err(CliError::Failed(format!(
                    "{}: {name} has dims {:?}, config expects {:?}",
                    checkpoint.display(),
                    p.dims(),
                    t.dims()
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != fresh.params.len() {
        return Err(CliError::Failed(format!(
            "{}: {} tensors, config expects {} (wrong --config or --mode?)",
            checkpoint.display(),
            params.len(),
            fresh.params.len()
        )));
    }
    Ok(Model { config: cfg.model.clone(), params })
}

fn predictions(model: &Model, samples: &[SampleRecord]) -> Result<Vec<Tensor>> {
    Ok(samples.par_iter().map(|s| model.predict(&s.image)).collect::<bvap::Result<Vec<_>>>()?)
}

fn score(cfg: &RunConfig, preds: &[Option<Tensor>], samples: &[SampleRecord]) -> Vec<MetricRow> {
    let sets: Vec<_> = samples.iter().map(|s| s.fixations.clone()).collect();
    (0..samples.len())
        .into_par_iter()
        .filter_map(|k| {
            let p = preds[k].as_ref()?;
            Some(evaluate(p, &samples[k].density, &sets[k], &pooled_others(&sets, k), &cfg.metrics))
        })
        .collect()
}

fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = REPORT_HEADER.join(",");
    out.push('\n');
    for r in rows.iter().chain(std::iter::once(&aggregate(rows))) {
        out.push_str(&r.to_csv_fields().join(","));
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

fn summary(cfg: &RunConfig, history: &TrainHistory, n_train: usize, n_val: usize, mean: Option<&MetricRow>) -> String {
    let mut s = String::from("# config\n");
    s.push_str(&cfg.to_text());
    s.push_str("\n# run\n");
    let _ = writeln!(s, "train_samples = {n_train}");
    let _ = writeln!(s, "val_samples = {n_val}");
    let _ = writeln!(s, "steps = {}", history.steps.len());
    let _ = writeln!(s, "stop = {:?}", history.stop);
    let _ = writeln!(s, "initial_loss = {}", fmt_opt(history.initial_loss()));
    let _ = writeln!(s, "final_loss = {}", fmt_opt(history.final_loss()));
    let _ = writeln!(s, "best_val_loss = {}", fmt_opt(history.best_val_loss));
    if let Some(m) = mean {
        s.push_str("\n# validation metrics (mean)\n");
        for (name, v) in REPORT_HEADER[1..].iter().zip(m.values()) {
            let _ = writeln!(s, "{name} = {}", fmt_opt(v));
        }
    }
    s
}

fn cmd_train(common: &Common, data: &DataArgs, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let samples = load_data(&cfg, data)?;
    let (train_set, val_set) = split(&cfg, samples);
    fs::create_dir_all(out).map_err(|e| bvap::Error::io(out, e))?;
    write(&out.join("run.cfg"), &cfg.to_text())?;

    let mut model = build_model(&cfg)?;
    eprintln!(
        "training {} ({} tensors, {} scalars) on {} samples, {} held out",
        cfg.model.mode,
        model.params.len(),
        model.params.num_scalars(),
        train_set.len(),
        val_set.len()
    );
    let ckpt = out.join("model.ckpt");
    let history = train(&mut model, &train_set, &val_set, &cfg.train, Some(&ckpt))?;
    if val_set.is_empty() {
        save_checkpoint(&model.params, &ckpt)?;
    }
    write(&out.join("loss.csv"), &history.to_csv())?;

    let mean = if val_set.is_empty() {
        None
    } else {
        let preds = predictions(&model, &val_set)?.into_iter().map(Some).collect::<Vec<_>>();
        Some(aggregate(&score(&cfg, &preds, &val_set)))
    };
    write(&out.join("summary.txt"), &summary(&cfg, &history, train_set.len(), val_set.len(), mean.as_ref()))?;
    eprintln!(
        "{:?} after {} steps: loss {} -> {}",
        history.stop,
        history.steps.len(),
        fmt_opt(history.initial_loss()),
        fmt_opt(history.final_loss())
    );
    Ok(())
}

fn cmd_predict(common: &Common, checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let model = restore_model(&cfg, checkpoint)?;
    let (x, (w, h)) = load_image(image, cfg.model.backbone.base_size)?;
    let map = model.predict(&x)?;
    save_map_png(&map, w, h, out)?;
    Ok(())
}

/// Reads `<dir>/<id>.png` as a map at `size x size`.
fn load_map(dir: &Path, id: &str, size: usize) -> Result<Tensor> {
    let path = dir.join(format!("{id}.png"));
    let img = image::open(&path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?.to_luma32f();
    let img = if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(Tensor::new([1, 1, size, size], img.pixels().map(|p| f64::from(p[0])).collect())?)
}

fn cmd_eval(
    common: &Common,
    checkpoint: Option<&Path>,
    maps: Option<&Path>,
    data: &DataArgs,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let samples = load_data(&cfg, data)?;
    let size = cfg.model.backbone.base_size;
    let preds: Vec<Option<Tensor>> = match (checkpoint, maps) {
        (Some(ckpt), _) => predictions(&restore_model(&cfg, ckpt)?, &samples)?.into_iter().map(Some).collect(),
        (None, Some(dir)) => samples
            .iter()
            .map(|s| match load_map(dir, &s.fixations.image_id, size) {
                Ok(m) => Some(m),
                Err(e) => {
                    eprintln!("skipping {}: {e}", s.fixations.image_id);
                    None
                }
            })
            .collect(),
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --maps".into())),
    };
    let rows = score(&cfg, &preds, &samples);
    write(out, &report_csv(&rows))?;
    let missing = samples.len() - rows.len();
    if missing > 0 {
        return Err(CliError::Failed(format!("{missing} of {} images had no usable prediction", samples.len())));
    }
    Ok(())
}

fn cmd_gradcheck(out: Option<&Path>) -> Result<()> {
    let entries = bvap::gradsuite::run_suite()?;
    let mut report = String::new();
    for e in &entries {
        report.push_str(&e.report_line());
        report.push('\n');
    }
    print!("{report}");
    if let Some(p) = out {
        write(p, &report)?;
    }
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_ablate(common: &Common, data: &DataArgs, modes: Option<&str>, out: &Path) -> Result<()> {
    let base = load_config(common)?;
    let modes: Vec<AblationMode> = match modes {
        Some(list) => list.split(',').map(|m| m.trim().parse()).collect::<bvap::Result<_>>()?,
        None => AblationMode::ALL.to_vec(),
    };
    let (train_set, val_set) = split(&base, load_data(&base, data)?);
    if val_set.is_empty() {
        return Err(CliError::Usage("ablation needs held-out samples; raise val_fraction or add data".into()));
    }
    fs::create_dir_all(out).map_err(|e| bvap::Error::io(out, e))?;
    let mut csv = String::from("mode,steps,final_train_loss,val_loss");
    for h in &REPORT_HEADER[1..] {
        csv.push(',');
        csv.push_str(h);
    }
    csv.push('\n');
    for mode in modes {
        let mut cfg = base.clone();
        cfg.model.mode = mode;
        let mut model = build_model(&cfg)?;
        eprintln!("ablation: {mode}");
        let history = train(&mut model, &train_set, &[], &cfg.train, None)?;
        let val_loss = mean_loss(&model, &val_set, cfg.train.weight_decay)?;
        let preds = predictions(&model, &val_set)?.into_iter().map(Some).collect::<Vec<_>>();
        let mean = aggregate(&score(&cfg, &preds, &val_set));
        let _ = write!(csv, "{mode},{},{},{val_loss}", history.steps.len(), fmt_opt(history.final_loss()));
        for v in mean.values() {
            let _ = write!(csv, ",{}", v.map(|x| x.to_string()).unwrap_or_default());
        }
        csv.push('\n');
        write(&out.join("ablation.csv"), &csv)?;
    }
    Ok(())
}
